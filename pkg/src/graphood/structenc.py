"""Perturbation-free two-view augmentation via structural encodings.

The structure view rewrites node features with a per-node encoding
s_i = [random-walk return probabilities || degree one-hot] while the
adjacency and the original features are left untouched, so neither view
perturbs the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .graphdata import Graph, GraphDataset, degrees
from .npzio import load_npz, save_npz

# above this node count the walk powers are kept sparse
DENSE_LIMIT = 2000


@dataclass(eq=False)
class StructuralEncoding:
    matrix: np.ndarray  # (n, d_rw + d_dg)
    d_rw: int
    d_dg: int


@dataclass(eq=False)
class ViewPair:
    """Feature view (A, X) and structure view (A, S) of one graph.

    Both views share the graph object, hence the identical adjacency.
    """
    graph: Graph
    encoding: StructuralEncoding

    @property
    def feature_matrix(self) -> np.ndarray:
        return self.graph.features

    @property
    def structure_matrix(self) -> np.ndarray:
        return self.encoding.matrix


def random_walk_encoding(g: Graph, d_rw: int, dense_limit: int = DENSE_LIMIT) -> np.ndarray:
    """Diagonals of the first d_rw powers of the transition matrix A D^-1.

    Isolated nodes have an all-zero transition column (the walker is
    absorbed), which leaves their return probabilities at 0.
    """
    if d_rw < 1:
        raise ArgumentError(f"d_rw must be at least 1, got {d_rw}")
    n = g.node_count
    out = np.zeros((n, d_rw))
    if n == 0 or len(g.edges) == 0:
        return out
    deg = degrees(g).astype(np.float64)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    if n <= dense_limit:
        a = np.zeros((n, n))
        a[g.edges[:, 0], g.edges[:, 1]] = 1.0
        a[g.edges[:, 1], g.edges[:, 0]] = 1.0
        t = a * inv[None, :]  # T_ij = A_ij / deg(j)
        power = t.copy()
        out[:, 0] = np.diagonal(power)
        for k in range(1, d_rw):
            power = t @ power
            out[:, k] = np.diagonal(power)
    else:
        from scipy import sparse
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
        vals = inv[cols]
        t = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        power = t.copy()
        out[:, 0] = power.diagonal()
        for k in range(1, d_rw):
            power = t @ power
            out[:, k] = power.diagonal()
    return out


def degree_encoding(g: Graph, d_dg: int) -> np.ndarray:
    """One-hot of node degree over buckets 1..d_dg, clamped at the top.

    Degree-0 nodes get an all-zero row; no bucket matches them.
    """
    if d_dg < 1:
        raise ArgumentError(f"d_dg must be at least 1, got {d_dg}")
    deg = degrees(g)
    out = np.zeros((g.node_count, d_dg))
    pos = deg >= 1
    out[np.nonzero(pos)[0], np.minimum(deg[pos], d_dg) - 1] = 1.0
    return out


def build_views(g: Graph, d_rw: int, d_dg: int) -> ViewPair:
    s = np.hstack([random_walk_encoding(g, d_rw), degree_encoding(g, d_dg)])
    return ViewPair(graph=g, encoding=StructuralEncoding(matrix=s, d_rw=d_rw, d_dg=d_dg))


def encode_dataset(ds: GraphDataset, d_rw: int, d_dg: int,
                   cache_path=None) -> list[ViewPair]:
    """Build view pairs for every graph, optionally through a cache file.

    The cache stores one encoding matrix per graph index plus a header;
    a header mismatch with the request invalidates the cache.
    """
    if cache_path is not None:
        cached = load_encoding_cache(cache_path, d_rw, d_dg, len(ds))
        if cached is not None:
            return [ViewPair(graph=g, encoding=StructuralEncoding(m, d_rw, d_dg))
                    for g, m in zip(ds.graphs, cached)]
    views = [build_views(g, d_rw, d_dg) for g in ds.graphs]
    if cache_path is not None:
        save_encoding_cache(cache_path, [v.encoding.matrix for v in views], d_rw, d_dg)
    return views


def save_encoding_cache(path, matrices, d_rw: int, d_dg: int) -> None:
    arrays = {"header": np.array([d_rw, d_dg, len(matrices)], dtype=np.int64)}
    for i, m in enumerate(matrices):
        arrays[f"enc_{i}"] = m
    save_npz(path, arrays)


def load_encoding_cache(path, d_rw: int, d_dg: int, n_graphs: int):
    path = Path(path)
    if not path.is_file():
        return None
    data = load_npz(path)
    header = data.get("header")
    if header is None or list(header) != [d_rw, d_dg, n_graphs]:
        return None
    return [data[f"enc_{i}"] for i in range(n_graphs)]


def stack_structure(views) -> np.ndarray:
    """Structure matrices of a batch, stacked in list order."""
    return np.vstack([v.structure_matrix for v in views])
