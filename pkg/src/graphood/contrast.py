"""Hierarchical contrastive losses and prototype maintenance.

All three losses share one pattern: cosine similarity scaled by a
temperature, a positive term, and a log-sum-exp over negatives that
excludes the positive pair (the default, literal form) unless
include_positive is set. Per-sample terms are returned alongside the
scalar loss because the same quantities double as OOD error scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tape, Tensor, grad_check
from .errors import ArgumentError

log = logging.getLogger(__name__)

# Additive mask that underflows to an exact zero inside log-sum-exp.
NEG_MASK = -1e30

# identity and diagonal-mask constants, cached per size (read-only)
_EYE_CACHE: dict[int, np.ndarray] = {}
_MASK_CACHE: dict[int, np.ndarray] = {}


def _eye(n: int) -> np.ndarray:
    if n not in _EYE_CACHE:
        _EYE_CACHE[n] = np.eye(n)
    return _EYE_CACHE[n]


def _diag_mask(n: int) -> np.ndarray:
    if n not in _MASK_CACHE:
        _MASK_CACHE[n] = NEG_MASK * np.eye(n)
    return _MASK_CACHE[n]


@dataclass(eq=False)
class PrototypeState:
    centers: np.ndarray       # (K, d_p)
    assignments: np.ndarray   # cluster index per training graph
    temps: np.ndarray | None  # (K,) concentration temperatures
    epoch: int = 0


@dataclass(eq=False)
class LevelErrors:
    node: np.ndarray
    graph: np.ndarray
    group: np.ndarray
    flags: tuple[str, ...] = ()


def _mean_of_terms(terms: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Stack per-graph scalar terms; the loss is their mean.

    Uses the same pairwise summation as np.mean so the returned errors
    average back to the loss bit-exactly.
    """
    stacked = ad.hstack(terms) if len(terms) > 1 else terms[0]
    loss = ad.scale(ad.row_sum(stacked), 1.0 / len(terms))
    errors = np.array([t.data[0, 0] for t in terms])
    return loss, errors


def node_loss(z_f: Tensor, z_s: Tensor, node_offsets: np.ndarray, tau: float,
              include_positive: bool = False) -> tuple[Tensor, np.ndarray, list[str]]:
    """Cross-view node agreement; negatives are the other nodes of the
    same graph in the opposite view. Symmetrized over both directions
    and averaged per graph, then over the batch.

    A 1-node graph has an empty negative set; its term falls back to
    -sim/tau and is flagged.
    """
    if z_f.shape != z_s.shape:
        raise ArgumentError(f"view shapes differ: {z_f.shape} vs {z_s.shape}")
    zf_n = ad.l2_normalize_rows(z_f)
    zs_n = ad.l2_normalize_rows(z_s)
    tape = z_f.tape
    terms: list[Tensor] = []
    flags: list[str] = []
    for j in range(len(node_offsets) - 1):
        lo, hi = int(node_offsets[j]), int(node_offsets[j + 1])
        n = hi - lo
        a = ad.slice_rows(zf_n, lo, hi)
        b = ad.slice_rows(zs_n, lo, hi)
        sims = ad.scale(a @ ad.transpose(b), 1.0 / tau)  # (n, n) cross-view
        if n == 1:
            terms.append(ad.scale(sims, -1.0))
            flags.append(f"graph {j}: single node, node-level fallback -sim/tau")
            continue
        pos = ad.row_sum(ad.mul(sims, tape.constant(_eye(n))))
        if include_positive:
            den_fs = ad.row_logsumexp(sims)
            den_sf = ad.row_logsumexp(ad.transpose(sims))
        else:
            mask = tape.constant(_diag_mask(n))
            den_fs = ad.row_logsumexp(sims + mask)
            den_sf = ad.row_logsumexp(ad.transpose(sims) + mask)
        per_node = (den_fs - pos) + (den_sf - pos)
        terms.append(ad.scale(ad.sum_all(per_node), 1.0 / (2 * n)))
    loss, errors = _mean_of_terms(terms)
    for f in flags:
        log.warning("node_loss: %s", f)
    return loss, errors, flags


def graph_loss(zg_f: Tensor, zg_s: Tensor, tau: float,
               include_positive: bool = False) -> tuple[Tensor, np.ndarray, list[str]]:
    """Cross-view graph agreement; negatives are the other graphs of the
    batch in the opposite view. A singleton batch falls back to
    -sim/tau and is flagged.
    """
    if zg_f.shape != zg_s.shape:
        raise ArgumentError(f"view shapes differ: {zg_f.shape} vs {zg_s.shape}")
    b = zg_f.shape[0]
    tape = zg_f.tape
    zf_n = ad.l2_normalize_rows(zg_f)
    zs_n = ad.l2_normalize_rows(zg_s)
    sims = ad.scale(zf_n @ ad.transpose(zs_n), 1.0 / tau)
    if b == 1:
        term = ad.scale(sims, -1.0)
        flag = "graph_loss: singleton batch, fallback -sim/tau"
        log.warning(flag)
        return term, np.array([term.data[0, 0]]), [flag]
    pos = ad.row_sum(ad.mul(sims, tape.constant(_eye(b))))
    if include_positive:
        den_fs = ad.row_logsumexp(sims)
        den_sf = ad.row_logsumexp(ad.transpose(sims))
    else:
        mask = tape.constant(_diag_mask(b))
        den_fs = ad.row_logsumexp(sims + mask)
        den_sf = ad.row_logsumexp(ad.transpose(sims) + mask)
    per_graph = ad.scale((den_fs - pos) + (den_sf - pos), 0.5)
    loss = ad.mean_all(per_graph)
    return loss, per_graph.data[:, 0].copy(), []


def graph_loss_banked(zg_f: Tensor, zg_s: Tensor, bank_f: np.ndarray,
                      bank_s: np.ndarray, tau: float,
                      include_positive: bool = False) -> tuple[Tensor, np.ndarray, list[str]]:
    """Graph-level terms with a fixed reference bank as the negative set,
    making each graph's score independent of the inference batch.
    """
    tape = zg_f.tape
    zf_n = ad.l2_normalize_rows(zg_f)
    zs_n = ad.l2_normalize_rows(zg_s)

    def normalize_rows(m):
        return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), ad.NORM_EPS)

    nb_s = tape.constant(normalize_rows(bank_s))
    nb_f = tape.constant(normalize_rows(bank_f))
    pos = ad.row_sum(ad.mul(zf_n, zs_n))  # paired row dot products
    pos = ad.scale(pos, 1.0 / tau)
    neg_fs = ad.scale(zf_n @ ad.transpose(nb_s), 1.0 / tau)
    neg_sf = ad.scale(zs_n @ ad.transpose(nb_f), 1.0 / tau)
    if include_positive:
        neg_fs = ad.hstack([neg_fs, pos])
        neg_sf = ad.hstack([neg_sf, pos])
    per_graph = ad.scale((ad.row_logsumexp(neg_fs) - pos)
                         + (ad.row_logsumexp(neg_sf) - pos), 0.5)
    loss = ad.mean_all(per_graph)
    return loss, per_graph.data[:, 0].copy(), []


def group_loss(z_group: Tensor, centers: np.ndarray, temps: np.ndarray,
               assignments: np.ndarray, tau_base: float,
               include_positive: bool = False) -> tuple[Tensor, np.ndarray, list[str]]:
    """Agreement between each graph and its prototype, against the other
    prototypes as negatives, each under its own concentration
    temperature. With a single prototype the term falls back to
    -sim/tau_base and is flagged.
    """
    b = z_group.shape[0]
    k = centers.shape[0]
    if len(assignments) != b:
        raise ArgumentError(f"{len(assignments)} assignments for a batch of {b}")
    tape = z_group.tape
    z_n = ad.l2_normalize_rows(z_group)
    c_n = centers / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), ad.NORM_EPS)
    if k == 1:
        sims = z_n @ tape.constant(c_n.T)
        term = ad.scale(sims, -1.0 / tau_base)
        flag = "group_loss: single prototype, fallback -sim/tau"
        log.warning(flag)
        return ad.mean_all(term), term.data[:, 0].copy(), [flag]
    sims = z_n @ tape.constant(c_n.T)                       # (b, k)
    scaled = ad.mul(sims, tape.constant(np.tile(1.0 / temps, (b, 1))))
    onehot = np.zeros((b, k))
    onehot[np.arange(b), assignments] = 1.0
    pos = ad.row_sum(ad.mul(scaled, tape.constant(onehot)))
    if include_positive:
        den = ad.row_logsumexp(scaled)
    else:
        den = ad.row_logsumexp(scaled + tape.constant(NEG_MASK * onehot))
    per_graph = den - pos
    loss = ad.mean_all(per_graph)
    return loss, per_graph.data[:, 0].copy(), []


# ---------------------------------------------------------------------------
# Prototypes
# ---------------------------------------------------------------------------

def lloyd_iterations(z: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    """Yield (centers, assignments, objective) per Lloyd iteration.

    Empty clusters are re-seeded to the point farthest from their stale
    center, skipping points already consumed by earlier re-seeds.
    """
    k = centers.shape[0]
    prev = None
    for _ in range(max_iter):
        d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        obj = float(d2[np.arange(len(z)), assign].sum())
        yield centers, assign, obj
        if prev is not None and np.array_equal(assign, prev):
            return
        prev = assign
        counts = np.bincount(assign, minlength=k)
        new_centers = centers.copy()
        for j in range(k):
            if counts[j] > 0:
                new_centers[j] = z[assign == j].mean(axis=0)
        used: set[int] = set()
        for j in range(k):
            if counts[j] == 0:
                dd = ((z - centers[j]) ** 2).sum(axis=1)
                for idx in np.argsort(-dd, kind="stable"):
                    if int(idx) not in used:
                        used.add(int(idx))
                        new_centers[j] = z[idx]
                        break
        centers = new_centers


def kmeans(z: np.ndarray, k: int, seed, max_iter: int = 100,
           epoch: int = 0) -> PrototypeState:
    """Seeded k-means++ initialization followed by Lloyd iterations."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < k:
        raise ArgumentError(f"k-means needs at least {k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, z.shape[1]))
    centers[0] = z[rng.integers(n)]
    d2 = ((z - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)  # all remaining points coincide
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[j] = z[idx]
        d2 = np.minimum(d2, ((z - centers[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for centers, assign, _ in lloyd_iterations(z, centers, max_iter=max_iter):
        pass
    return PrototypeState(centers=centers.copy(), assignments=assign.copy(),
                          temps=None, epoch=epoch)


def concentration_temperatures(z: np.ndarray, state: PrototypeState,
                               tau_base: float) -> np.ndarray:
    """Per-cluster temperatures that grow with cluster spread.

    phi_j = sum of member distances to the center over n_j * log(n_j + 10);
    singleton and empty clusters borrow the mean of the well-formed phi,
    and the result is normalized to mean tau_base then clamped to
    [tau_base / 10, 10 * tau_base].
    """
    k = state.centers.shape[0]
    phi = np.zeros(k)
    degenerate = []
    for j in range(k):
        members = z[state.assignments == j]
        n_j = len(members)
        if n_j <= 1:
            degenerate.append(j)
            continue
        dist = np.linalg.norm(members - state.centers[j], axis=1).sum()
        phi[j] = dist / (n_j * np.log(n_j + 10.0))
    good = [j for j in range(k) if j not in degenerate]
    if degenerate:
        phi[degenerate] = phi[good].mean() if good else 1.0
    mean_phi = phi.mean()
    if mean_phi <= 0.0:
        return np.full(k, tau_base)
    temps = tau_base * phi / mean_phi
    return np.clip(temps, tau_base / 10.0, 10.0 * tau_base)


def fit_prototypes(z: np.ndarray, k: int, seed, tau_base: float,
                   epoch: int = 0) -> PrototypeState:
    state = kmeans(z, k, seed, epoch=epoch)
    state.temps = concentration_temperatures(z, state, tau_base)
    return state


# ---------------------------------------------------------------------------
# End-to-end gradient checks through encoder + projection
# ---------------------------------------------------------------------------

def _flatten_params(tensors: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in tensors.values()]).reshape(-1, 1)


def _unflatten_params(tape: Tape, x: Tensor, shapes: list[tuple[str, tuple[int, int]]]):
    leaves = {}
    off = 0
    for name, (r, c) in shapes:
        seg = ad.slice_rows(x, off, off + r * c)
        leaves[name] = ad.reshape(seg, r, c)
        off += r * c
    return leaves


def _tiny_instance(rng: np.random.Generator):
    from .encoder import ModelConfig, _layer_shapes, forward_all, init_params
    from .graphdata import batch_graphs, make_graph
    from .structenc import build_views, stack_structure

    cfg = ModelConfig(layers=1, hidden_dim=3, proj_layers=1, proj_dim=3,
                      temperature=0.3, clusters=2, rw_dim=2, degree_dim=3,
                      seed=int(rng.integers(2**31)))
    graphs = []
    for _ in range(3):
        n = int(rng.integers(2, 5))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.6]
        graphs.append(make_graph(n, pairs or [(0, 1)], rng.normal(size=(n, 2))))
    views = [build_views(g, cfg.rw_dim, cfg.degree_dim) for g in graphs]
    batch = batch_graphs(graphs)
    structure = stack_structure(views)
    params = init_params(cfg, d_f=2, d_s=cfg.rw_dim + cfg.degree_dim)
    shapes = _layer_shapes(cfg, 2, cfg.rw_dim + cfg.degree_dim)
    x0 = _flatten_params(params.tensors) + 0.01 * rng.normal(size=(sum(r * c for _, (r, c) in shapes), 1))

    def forward(tape: Tape, x: Tensor):
        leaves = _unflatten_params(tape, x, shapes)
        return forward_all(tape, leaves, cfg, batch, structure)

    return cfg, batch, forward, x0


def loss_gradcheck_suite(instances: int = 20, seed: int = 0,
                         h: float = 1e-5, tol: float = 1e-4) -> list[GradCheckReport]:
    """Finite-difference checks of each loss through the full model,
    differentiating with respect to every trainable parameter at once.
    """
    reports = []
    for kind in ("node_loss", "graph_loss", "group_loss"):
        worst, coords, excluded, passed = 0.0, 0, [], True
        for inst in range(instances):
            rng = np.random.default_rng([seed, inst, hash(kind) & 0xFFFF])
            cfg, batch, forward, x0 = _tiny_instance(rng)
            centers = rng.normal(size=(cfg.clusters, cfg.projection_dim))
            temps = rng.uniform(0.2, 0.5, size=cfg.clusters)
            assigns = rng.integers(0, cfg.clusters, size=batch.graph_count)

            def build(tape: Tape, x: Tensor, kind=kind):
                emb = forward(tape, x)
                if kind == "node_loss":
                    loss, _, _ = node_loss(emb.z_node_f, emb.z_node_s,
                                           batch.node_offsets, cfg.temperature)
                elif kind == "graph_loss":
                    loss, _, _ = graph_loss(emb.z_graph_f, emb.z_graph_s, cfg.temperature)
                else:
                    loss, _, _ = group_loss(emb.z_group, centers, temps,
                                            assigns, cfg.temperature)
                return loss

            rep = grad_check(build, x0, h=h, tol=tol, name=kind)
            worst = max(worst, rep.max_rel_err)
            coords += rep.n_coords
            excluded.extend(rep.excluded)
            passed = passed and rep.passed
        reports.append(GradCheckReport(name=kind, max_rel_err=worst, n_coords=coords,
                                       excluded=tuple(excluded), passed=passed))
    return reports
