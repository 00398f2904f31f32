"""Graph containers, TU-format IO, synthetic generators, splits, batching.

Graphs are simple and undirected: self-loops and duplicate edges are
dropped at construction, each undirected edge is stored once as (u, v)
with u < v, and all node indices are 0-based.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import ArgumentError, ParseError

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Graph:
    node_count: int
    edges: np.ndarray      # (m, 2) int64, u < v, lexicographically sorted
    features: np.ndarray   # (node_count, d_f) float64
    label: int | None = None

    @property
    def d_f(self) -> int:
        return self.features.shape[1]


@dataclass(eq=False)
class GraphDataset:
    name: str
    graphs: tuple[Graph, ...]
    d_f: int
    parse_summary: dict | None = None

    def __len__(self) -> int:
        return len(self.graphs)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0
    mode: str = "ood_pair"  # or "anomaly"

    def __post_init__(self):
        if not (0.0 < self.train_fraction <= 1.0):
            raise ArgumentError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.mode not in ("ood_pair", "anomaly"):
            raise ArgumentError(f"unknown split mode {self.mode!r}")


@dataclass(eq=False)
class BatchedGraph:
    rows: np.ndarray          # (2m,) int64; both orientations of every edge
    cols: np.ndarray
    features: np.ndarray      # (n_total, d_f)
    segment_ids: np.ndarray   # (n_total,) nondecreasing graph slot per node
    node_offsets: np.ndarray  # (graph_count + 1,)
    graph_count: int
    labels: tuple

    _csr_cache: tuple | None = field(default=None, repr=False)

    @property
    def n_total(self) -> int:
        return self.features.shape[0]

    def adjacency_csr(self):
        """Block-diagonal adjacency as (csr, csr_transpose); cached."""
        if self._csr_cache is None:
            from scipy import sparse
            n = self.n_total
            ones = np.ones(len(self.rows))
            a = sparse.csr_matrix((ones, (self.rows, self.cols)), shape=(n, n))
            self._csr_cache = (a, a.T.tocsr())
        return self._csr_cache


def canonical_edges(edges, node_count: int) -> tuple[np.ndarray, int, int]:
    """Normalize an edge list; returns (edges, n_self_loops, n_duplicates)."""
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(arr) and (arr.min() < 0 or arr.max() >= node_count):
        raise ArgumentError(f"edge endpoint out of range [0, {node_count})")
    self_mask = arr[:, 0] == arr[:, 1]
    n_self = int(self_mask.sum())
    arr = arr[~self_mask]
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    pairs = np.stack([lo, hi], axis=1)
    uniq = np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)
    n_dup = len(pairs) - len(uniq)
    return uniq, n_self, n_dup


def make_graph(node_count: int, edges, features, label: int | None = None) -> Graph:
    if node_count < 0:
        raise ArgumentError(f"node_count must be nonnegative, got {node_count}")
    feats = np.ascontiguousarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != node_count:
        raise ArgumentError(f"features must be ({node_count}, d_f), got {feats.shape}")
    if feats.shape[1] < 1:
        raise ArgumentError("feature width must be at least 1")
    uniq, _, _ = canonical_edges(edges, node_count)
    return Graph(node_count=node_count, edges=uniq, features=feats, label=label)


def make_dataset(name: str, graphs, parse_summary: dict | None = None) -> GraphDataset:
    graphs = tuple(graphs)
    if not graphs:
        raise ArgumentError("dataset must contain at least one graph")
    d_f = graphs[0].d_f
    for i, g in enumerate(graphs):
        if g.d_f != d_f:
            raise ArgumentError(f"graph {i} has feature width {g.d_f}, expected {d_f}")
    return GraphDataset(name=name, graphs=graphs, d_f=d_f, parse_summary=parse_summary)


def degrees(g: Graph) -> np.ndarray:
    deg = np.zeros(g.node_count, dtype=np.int64)
    if len(g.edges):
        np.add.at(deg, g.edges[:, 0], 1)
        np.add.at(deg, g.edges[:, 1], 1)
    return deg


def graphs_equal(a: Graph, b: Graph) -> bool:
    return (a.node_count == b.node_count and a.label == b.label
            and np.array_equal(a.edges, b.edges)
            and np.array_equal(a.features, b.features))


def datasets_equal(a: GraphDataset, b: GraphDataset) -> bool:
    return (len(a) == len(b) and a.d_f == b.d_f
            and all(graphs_equal(x, y) for x, y in zip(a.graphs, b.graphs)))


# ---------------------------------------------------------------------------
# TU benchmark format
# ---------------------------------------------------------------------------

def _read_lines(path: Path) -> list[str]:
    return path.read_text().splitlines()


def _parse_int(text: str, path: Path, lineno: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected an integer, got {text.strip()!r}") from None


def parse_tu_dataset(root_dir, name: str) -> GraphDataset:
    """Parse a TU-format dataset from <root_dir>/<name>_*.txt files.

    Node features come from node attributes when present, otherwise a
    one-hot of node labels, otherwise a constant-1 column. Self-loops
    and duplicate edges are dropped; counts land in parse_summary.
    """
    root = Path(root_dir)
    a_path = root / f"{name}_A.txt"
    ind_path = root / f"{name}_graph_indicator.txt"
    for p in (a_path, ind_path):
        if not p.is_file():
            raise ParseError(f"missing mandatory file {p}")

    ind_lines = _read_lines(ind_path)
    indicator = np.array([_parse_int(s, ind_path, i + 1) for i, s in enumerate(ind_lines)])
    n_total = len(indicator)
    if n_total == 0:
        raise ParseError(f"{ind_path}: empty graph indicator")

    graph_ids = np.unique(indicator)
    id_to_slot = {int(gid): slot for slot, gid in enumerate(graph_ids)}
    node_slot = np.array([id_to_slot[int(v)] for v in indicator])
    # local node index = order of appearance within each graph
    local_idx = np.zeros(n_total, dtype=np.int64)
    counters = np.zeros(len(graph_ids), dtype=np.int64)
    for i, s in enumerate(node_slot):
        local_idx[i] = counters[s]
        counters[s] += 1

    per_graph_edges: list[list[tuple[int, int]]] = [[] for _ in graph_ids]
    for lineno, line in enumerate(_read_lines(a_path), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"{a_path}:{lineno}: expected 'i, j', got {line!r}")
        u = _parse_int(parts[0], a_path, lineno) - 1
        v = _parse_int(parts[1], a_path, lineno) - 1
        if not (0 <= u < n_total and 0 <= v < n_total):
            raise ParseError(f"{a_path}:{lineno}: edge ({u + 1}, {v + 1}) outside "
                             f"the {n_total} indicator lines")
        if node_slot[u] != node_slot[v]:
            raise ParseError(f"{a_path}:{lineno}: edge crosses graphs "
                             f"{graph_ids[node_slot[u]]} and {graph_ids[node_slot[v]]}")
        per_graph_edges[node_slot[u]].append((int(local_idx[u]), int(local_idx[v])))

    attr_path = root / f"{name}_node_attributes.txt"
    nlab_path = root / f"{name}_node_labels.txt"
    features: np.ndarray
    if attr_path.is_file():
        rows = []
        width = None
        for lineno, line in enumerate(_read_lines(attr_path), start=1):
            vals = [p.strip() for p in line.split(",")]
            try:
                row = [float(v) for v in vals]
            except ValueError:
                raise ParseError(f"{attr_path}:{lineno}: malformed real value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{attr_path}:{lineno}: ragged row, expected "
                                 f"{width} values, got {len(row)}")
            rows.append(row)
        if len(rows) != n_total:
            raise ParseError(f"{attr_path}: {len(rows)} rows for {n_total} nodes")
        features = np.array(rows, dtype=np.float64)
    elif nlab_path.is_file():
        lab_lines = _read_lines(nlab_path)
        if len(lab_lines) != n_total:
            raise ParseError(f"{nlab_path}: {len(lab_lines)} rows for {n_total} nodes")
        labels = np.array([_parse_int(s, nlab_path, i + 1) for i, s in enumerate(lab_lines)])
        classes = np.unique(labels)
        features = np.zeros((n_total, len(classes)))
        col = {int(c): k for k, c in enumerate(classes)}
        for i, lab in enumerate(labels):
            features[i, col[int(lab)]] = 1.0
    else:
        features = np.ones((n_total, 1))

    glab_path = root / f"{name}_graph_labels.txt"
    graph_labels: list[int | None]
    if glab_path.is_file():
        glab_lines = _read_lines(glab_path)
        if len(glab_lines) != len(graph_ids):
            raise ParseError(f"{glab_path}: {len(glab_lines)} rows for {len(graph_ids)} graphs")
        graph_labels = [_parse_int(s, glab_path, i + 1) for i, s in enumerate(glab_lines)]
    else:
        graph_labels = [None] * len(graph_ids)

    n_self = n_dup = 0
    graphs = []
    for slot in range(len(graph_ids)):
        n = int(counters[slot])
        node_rows = np.nonzero(node_slot == slot)[0]
        feats = features[node_rows]
        edges, s, d = canonical_edges(per_graph_edges[slot] or np.zeros((0, 2)), n)
        n_self += s
        n_dup += d
        graphs.append(Graph(node_count=n, edges=edges, features=feats,
                            label=graph_labels[slot]))
    summary = {"graphs": len(graphs), "nodes": n_total,
               "self_loops_dropped": n_self, "duplicate_edges_dropped": n_dup}
    log.info("parsed %s: %d graphs, %d nodes, dropped %d self-loops and %d duplicates",
             name, len(graphs), n_total, n_self, n_dup)
    return make_dataset(name, graphs, parse_summary=summary)


def write_tu_dataset(ds: GraphDataset, root_dir, name: str | None = None) -> None:
    """Write a dataset in TU layout; edges are listed in both directions."""
    name = name or ds.name
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, attr_lines = [], [], []
    offset = 0
    for gi, g in enumerate(ds.graphs, start=1):
        for u, v in g.edges:
            a_lines.append(f"{offset + u + 1}, {offset + v + 1}")
            a_lines.append(f"{offset + v + 1}, {offset + u + 1}")
        for i in range(g.node_count):
            ind_lines.append(str(gi))
            attr_lines.append(", ".join(repr(x) for x in g.features[i]))
        offset += g.node_count
    (root / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (root / f"{name}_node_attributes.txt").write_text("\n".join(attr_lines) + "\n")
    if all(g.label is not None for g in ds.graphs):
        glab = "\n".join(str(g.label) for g in ds.graphs) + "\n"
        (root / f"{name}_graph_labels.txt").write_text(glab)


# ---------------------------------------------------------------------------
# Synthetic generators and split protocols
# ---------------------------------------------------------------------------

def _graph_from_nx(gnx, n: int) -> Graph:
    edges = np.array(sorted((min(u, v), max(u, v)) for u, v in gnx.edges()),
                     dtype=np.int64).reshape(-1, 2)
    return Graph(node_count=n, edges=edges, features=np.ones((n, 1)), label=None)


def generate_synthetic_pair(n_graphs: int, seed: int) -> tuple[GraphDataset, GraphDataset]:
    """Erdos-Renyi in-distribution set and preferential-attachment OOD set.

    Node counts are uniform in [20, 40]; ER edge probability is 0.15 and
    the attachment generator adds 2 edges per new node. All graphs carry
    a constant-1 feature so only structure separates the two sets.
    """
    if n_graphs < 2:
        raise ArgumentError(f"n_graphs must be at least 2, got {n_graphs}")
    rng = np.random.default_rng([seed, 17])
    id_graphs, ood_graphs = [], []
    for _ in range(n_graphs):
        n = int(rng.integers(20, 41))
        g = nx.erdos_renyi_graph(n, 0.15, seed=int(rng.integers(2**31)))
        id_graphs.append(_graph_from_nx(g, n))
    for _ in range(n_graphs):
        n = int(rng.integers(20, 41))
        g = nx.barabasi_albert_graph(n, 2, seed=int(rng.integers(2**31)))
        ood_graphs.append(_graph_from_nx(g, n))
    return (make_dataset("synthetic_er", id_graphs),
            make_dataset("synthetic_ba", ood_graphs))


def split_ood(id_ds: GraphDataset, ood_ds: GraphDataset,
              spec: SplitSpec) -> tuple[GraphDataset, GraphDataset, np.ndarray]:
    """Train on a seeded fraction of ID; test on the rest plus matched OOD."""
    if spec.mode != "ood_pair":
        raise ArgumentError(f"split_ood requires mode='ood_pair', got {spec.mode!r}")
    rng = np.random.default_rng([spec.seed, 101])
    n_id = len(id_ds)
    perm = rng.permutation(n_id)
    n_train = int(spec.train_fraction * n_id)
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    need = len(test_idx)
    if len(ood_ds) < need:
        raise ArgumentError(f"need {need} OOD graphs for testing, dataset has {len(ood_ds)}")
    ood_sel = rng.choice(len(ood_ds), size=need, replace=False)
    train = make_dataset(f"{id_ds.name}_train", [id_ds.graphs[i] for i in train_idx])
    test_graphs = [id_ds.graphs[i] for i in test_idx] + [ood_ds.graphs[j] for j in ood_sel]
    test = make_dataset(f"{id_ds.name}_{ood_ds.name}_test", test_graphs)
    labels = np.concatenate([np.zeros(need, dtype=np.int64),
                             np.ones(need, dtype=np.int64)])
    return train, test, labels


def split_anomaly(ds: GraphDataset, spec: SplitSpec) -> tuple[GraphDataset, GraphDataset, np.ndarray]:
    """Minority class becomes the anomaly set; train only on normal graphs."""
    if spec.mode != "anomaly":
        raise ArgumentError(f"split_anomaly requires mode='anomaly', got {spec.mode!r}")
    if any(g.label is None for g in ds.graphs):
        raise ArgumentError("anomaly split requires graph labels on every graph")
    labels = np.array([g.label for g in ds.graphs])
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ArgumentError("anomaly split requires at least two label classes")
    min_count = counts.min()
    # tie-break: among equally small classes the larger label id is anomalous
    anomaly_class = classes[counts == min_count].max()
    norm_idx = np.nonzero(labels != anomaly_class)[0]
    anom_idx = np.nonzero(labels == anomaly_class)[0]
    rng = np.random.default_rng([spec.seed, 202])
    perm = rng.permutation(len(norm_idx))
    n_train = int(spec.train_fraction * len(norm_idx))
    train_idx = norm_idx[perm[:n_train]]
    heldout_idx = norm_idx[perm[n_train:]]
    train = make_dataset(f"{ds.name}_train", [ds.graphs[i] for i in train_idx])
    test_graphs = [ds.graphs[i] for i in heldout_idx] + [ds.graphs[i] for i in anom_idx]
    test = make_dataset(f"{ds.name}_test", test_graphs)
    test_labels = np.concatenate([np.zeros(len(heldout_idx), dtype=np.int64),
                                  np.ones(len(anom_idx), dtype=np.int64)])
    return train, test, test_labels


# ---------------------------------------------------------------------------
# Mini-batch assembly
# ---------------------------------------------------------------------------

def batch_graphs(graphs) -> BatchedGraph:
    """Disjoint union of graphs; node blocks follow list order."""
    graphs = list(graphs)
    if not graphs:
        raise ArgumentError("cannot batch an empty list of graphs")
    d_f = graphs[0].d_f
    rows_parts, cols_parts, seg_parts = [], [], []
    offsets = [0]
    for slot, g in enumerate(graphs):
        if g.d_f != d_f:
            raise ArgumentError(f"graph {slot} has feature width {g.d_f}, expected {d_f}")
        off = offsets[-1]
        if len(g.edges):
            u = g.edges[:, 0] + off
            v = g.edges[:, 1] + off
            rows_parts.append(np.concatenate([u, v]))
            cols_parts.append(np.concatenate([v, u]))
        seg_parts.append(np.full(g.node_count, slot, dtype=np.int64))
        offsets.append(off + g.node_count)
    rows = np.concatenate(rows_parts) if rows_parts else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols_parts) if cols_parts else np.zeros(0, dtype=np.int64)
    return BatchedGraph(
        rows=rows, cols=cols,
        features=np.vstack([g.features for g in graphs]),
        segment_ids=np.concatenate(seg_parts),
        node_offsets=np.array(offsets, dtype=np.int64),
        graph_count=len(graphs),
        labels=tuple(g.label for g in graphs),
    )


def unbatch_graphs(batch: BatchedGraph) -> list[Graph]:
    """Inverse of batch_graphs."""
    out = []
    fwd = batch.rows < batch.cols  # one orientation per undirected edge
    rows, cols = batch.rows[fwd], batch.cols[fwd]
    for slot in range(batch.graph_count):
        lo, hi = batch.node_offsets[slot], batch.node_offsets[slot + 1]
        sel = (rows >= lo) & (rows < hi)
        edges = np.stack([rows[sel] - lo, cols[sel] - lo], axis=1).astype(np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        out.append(Graph(node_count=int(hi - lo), edges=edges[order],
                         features=batch.features[lo:hi].copy(),
                         label=batch.labels[slot]))
    return out
