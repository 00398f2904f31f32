"""Training loop: batching, Adam, epoch-start re-clustering, adaptive
level weights, and the per-level error statistics used for scoring.

Each epoch runs three phases: a no-gradient pass over the whole train
set to refresh prototypes, the optimization pass over seeded batches,
and a recording pass over the same batches that captures per-sample
errors under the updated parameters. The recorded deviations drive the
next epoch's level weights and, after the final epoch, the z-score
normalization used at inference.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .contrast import PrototypeState, fit_prototypes, graph_loss, group_loss, node_loss
from .encoder import ModelConfig, ModelParams, forward_all, init_params, lift_params
from .errors import ArgumentError, NumericalError
from .graphdata import GraphDataset, batch_graphs
from .structenc import encode_dataset, stack_structure

log = logging.getLogger(__name__)

FULLSET_CHUNK = 256
ALL_LEVELS = (True, True, True)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.5
    variant: str = "adaptive"            # or "simp"
    seed: int = 0
    levels: tuple[bool, bool, bool] = ALL_LEVELS  # node / graph / group toggles

    def validate(self) -> None:
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ArgumentError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.alpha < 0:
            raise ArgumentError(f"alpha must be nonnegative, got {self.alpha}")
        if self.variant not in ("adaptive", "simp"):
            raise ArgumentError(f"unknown variant {self.variant!r}")
        if not any(self.levels):
            raise ArgumentError("at least one contrast level must be enabled")


@dataclass(eq=False)
class TrainStats:
    epoch_losses: list[np.ndarray] = field(default_factory=list)   # (3,) per epoch
    epoch_sigma: list[np.ndarray] = field(default_factory=list)    # (3,) per epoch
    epoch_seconds: list[float] = field(default_factory=list)
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None


def adaptive_weights(sigma, alpha: float) -> np.ndarray:
    """Per-level loss weights sigma**alpha; zero deviation gives weight 0
    for alpha > 0 and 1 for alpha = 0 (which recovers the plain sum).
    """
    if alpha < 0:
        raise ArgumentError(f"alpha must be nonnegative, got {alpha}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ArgumentError("deviations must be nonnegative")
    if alpha == 0:
        return np.ones_like(sigma)
    return np.where(sigma > 0, np.power(sigma, alpha), 0.0)


@dataclass(eq=False)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.tensors.items()},
                   v={k: np.zeros_like(a) for k, a in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, tcfg: TrainConfig) -> None:
    """Standard bias-corrected Adam, updating tensors in their fixed order."""
    state.t += 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= tcfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + tcfg.adam_eps)


def _make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle into batches; a trailing batch of 1 folds into the
    previous batch instead of standing alone.
    """
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _batch_losses(tape, leaves, cfg: ModelConfig, batch, structure,
                  proto: PrototypeState | None, batch_assignments,
                  levels: tuple[bool, bool, bool]):
    """Forward plus the enabled per-level losses for one batch."""
    emb = forward_all(tape, leaves, cfg, batch, structure)
    out = {}
    if levels[0]:
        loss, errs, _ = node_loss(emb.z_node_f, emb.z_node_s, batch.node_offsets,
                                  cfg.temperature, cfg.include_positive)
        out["node"] = (loss, errs)
    if levels[1]:
        loss, errs, _ = graph_loss(emb.z_graph_f, emb.z_graph_s,
                                   cfg.temperature, cfg.include_positive)
        out["graph"] = (loss, errs)
    if levels[2]:
        loss, errs, _ = group_loss(emb.z_group, proto.centers, proto.temps,
                                   batch_assignments, cfg.temperature,
                                   cfg.include_positive)
        out["group"] = (loss, errs)
    return emb, out


def collect_group_embeddings(params: ModelParams, views, chunk: int = FULLSET_CHUNK) -> np.ndarray:
    """Group-space embeddings for a list of view pairs, without gradients.

    Processed in fixed-size chunks and merged in input order, so the
    result is independent of chunking.
    """
    outs = []
    for i in range(0, len(views), chunk):
        part = views[i:i + chunk]
        batch = batch_graphs([v.graph for v in part])
        tape = ad.Tape()
        leaves = lift_params(tape, params, trainable=False)
        emb = forward_all(tape, leaves, params.cfg, batch, stack_structure(part))
        outs.append(emb.z_group.data)
    return np.vstack(outs)


def train(train_set: GraphDataset, cfg: ModelConfig, tcfg: TrainConfig,
          cache_path=None) -> tuple[ModelParams, TrainStats]:
    """Train the two encoders and the heads on an unlabeled ID dataset."""
    cfg.validate()
    tcfg.validate()
    use_group = tcfg.levels[2]
    min_size = max(cfg.clusters if use_group else 2, tcfg.batch_size)
    if len(train_set) < min_size:
        raise ArgumentError(f"training set has {len(train_set)} graphs, "
                            f"need at least {min_size}")

    views = encode_dataset(train_set, cfg.rw_dim, cfg.degree_dim, cache_path=cache_path)
    d_s = cfg.rw_dim + cfg.degree_dim
    params = init_params(cfg, d_f=train_set.d_f, d_s=d_s)
    opt = AdamState.for_params(params)
    stats = TrainStats()
    n = len(train_set)
    weights = np.ones(3)
    proto: PrototypeState | None = None

    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        if use_group:
            group_z = collect_group_embeddings(params, views)
            proto = fit_prototypes(group_z, cfg.clusters, [tcfg.seed, 2000 + epoch],
                                   cfg.temperature, epoch=epoch)
        rng = np.random.default_rng([tcfg.seed, 1000 + epoch])
        batches = _make_batches(n, tcfg.batch_size, rng)

        if tcfg.variant == "simp":
            weights = np.ones(3)

        loss_sums = np.zeros(3)
        loss_counts = np.zeros(3)
        for bi, idx in enumerate(batches):
            batch = batch_graphs([train_set.graphs[i] for i in idx])
            structure = stack_structure([views[i] for i in idx])
            assigns = proto.assignments[idx] if use_group else None
            tape = ad.Tape()
            leaves = lift_params(tape, params, trainable=True)
            _, losses = _batch_losses(tape, leaves, cfg, batch, structure,
                                      proto, assigns, tcfg.levels)
            total = None
            for li, level in enumerate(("node", "graph", "group")):
                if level not in losses:
                    continue
                lt, _ = losses[level]
                if not np.isfinite(lt.data[0, 0]):
                    raise NumericalError(f"non-finite {level} loss at epoch {epoch} "
                                         f"batch {bi}")
                loss_sums[li] += lt.data[0, 0]
                loss_counts[li] += 1
                term = ad.scale(lt, float(weights[li]))
                total = term if total is None else total + term
            grads_by_id = tape.backward(total)
            grads = {name: grads_by_id.get(t.node_id) for name, t in leaves.items()}
            adam_step(params, grads, opt, tcfg)

        # recording pass: per-sample errors under the updated parameters,
        # same batch membership, epoch-start prototypes
        err = np.zeros((3, n))
        for idx in batches:
            batch = batch_graphs([train_set.graphs[i] for i in idx])
            structure = stack_structure([views[i] for i in idx])
            assigns = proto.assignments[idx] if use_group else None
            tape = ad.Tape()
            leaves = lift_params(tape, params, trainable=False)
            _, losses = _batch_losses(tape, leaves, cfg, batch, structure,
                                      proto, assigns, tcfg.levels)
            for li, level in enumerate(("node", "graph", "group")):
                if level in losses:
                    err[li, idx] = losses[level][1]

        mu = err.mean(axis=1)
        sigma = err.std(axis=1)  # population deviation
        if tcfg.variant == "adaptive":
            weights = adaptive_weights(sigma, tcfg.alpha)
        mean_losses = np.where(loss_counts > 0, loss_sums / np.maximum(loss_counts, 1), 0.0)
        seconds = time.perf_counter() - t0
        stats.epoch_losses.append(mean_losses)
        stats.epoch_sigma.append(sigma.copy())
        stats.epoch_seconds.append(seconds)
        stats.mu, stats.sigma = mu, sigma
        log.info("epoch=%d loss_node=%.9g loss_graph=%.9g loss_group=%.9g "
                 "sigma_node=%.9g sigma_graph=%.9g sigma_group=%.9g seconds=%.3f",
                 epoch, *mean_losses, *sigma, seconds)

    params.mu = stats.mu
    params.sigma = stats.sigma
    if use_group:
        params.prototypes = proto.centers
        params.proto_temps = proto.temps
    _fill_reference_bank(params, train_set, views, tcfg)
    params.meta = {"variant": tcfg.variant, "levels": list(map(bool, tcfg.levels))}
    return params, stats


def _fill_reference_bank(params: ModelParams, train_set: GraphDataset,
                         views, tcfg: TrainConfig) -> None:
    """Seeded sample of training graph-space embeddings, both views, used
    as a batch-independent negative set at scoring time.
    """
    rng = np.random.default_rng([tcfg.seed, 3])
    size = min(tcfg.batch_size, len(train_set))
    sel = np.sort(rng.choice(len(train_set), size=size, replace=False))
    part = [views[i] for i in sel]
    batch = batch_graphs([v.graph for v in part])
    tape = ad.Tape()
    leaves = lift_params(tape, params, trainable=False)
    emb = forward_all(tape, leaves, params.cfg, batch, stack_structure(part))
    params.bank_f = emb.z_graph_f.data.copy()
    params.bank_s = emb.z_graph_s.data.copy()


def simp_config(tcfg: TrainConfig) -> TrainConfig:
    return replace(tcfg, variant="simp")
