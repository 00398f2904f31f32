"""Inference-time error computation, OOD score aggregation, AUC, and the
repeated-evaluation harness.

A larger score means the graph more likely comes from outside the
training distribution; both aggregations preserve that orientation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .contrast import LevelErrors, graph_loss, graph_loss_banked, group_loss, node_loss
from .encoder import ModelConfig, ModelParams, forward_all, lift_params, save_checkpoint
from .errors import ArgumentError, StateError
from .graphdata import Graph, GraphDataset, batch_graphs
from .structenc import build_views, stack_structure
from .trainer import ALL_LEVELS, TrainConfig, train

log = logging.getLogger(__name__)


def nearest_prototype(z: np.ndarray, prototypes: np.ndarray) -> tuple[int, float]:
    """Most cosine-similar prototype; ties go to the smallest index."""
    if prototypes is None or len(prototypes) == 0:
        raise StateError("prototype state is empty")
    z = np.asarray(z, dtype=np.float64).ravel()
    zn = z / max(np.linalg.norm(z), ad.NORM_EPS)
    cn = prototypes / np.maximum(np.linalg.norm(prototypes, axis=1, keepdims=True),
                                 ad.NORM_EPS)
    sims = cn @ zn
    idx = int(np.argmax(sims))
    return idx, float(sims[idx])


def per_sample_errors(params: ModelParams, graphs, negatives: str = "batch",
                      group_score: str = "loss",
                      levels: tuple[bool, bool, bool] = ALL_LEVELS) -> LevelErrors:
    """Per-level contrastive errors for a list of graphs scored together.

    Node-level negatives come from each graph's own nodes; graph-level
    negatives from the inference batch (or the training reference bank
    when negatives="bank"); the group level uses the nearest prototype,
    never re-clustering test data. group_score="negsim" replaces the
    group term with the plain negative prototype similarity.
    """
    if negatives not in ("batch", "bank"):
        raise ArgumentError(f"unknown negative mode {negatives!r}")
    if group_score not in ("loss", "negsim"):
        raise ArgumentError(f"unknown group score mode {group_score!r}")
    graphs = list(graphs)
    if not graphs:
        raise ArgumentError("no graphs to score")
    cfg = params.cfg
    if levels[2] and (params.prototypes is None or params.proto_temps is None):
        raise StateError("model has no prototypes; train before scoring")
    if negatives == "bank" and (params.bank_f is None or params.bank_s is None):
        raise StateError("model has no reference bank; train before scoring")

    views = [build_views(g, cfg.rw_dim, cfg.degree_dim) for g in graphs]
    batch = batch_graphs(graphs)
    tape = ad.Tape()
    leaves = lift_params(tape, params, trainable=False)
    emb = forward_all(tape, leaves, cfg, batch, stack_structure(views))

    b = len(graphs)
    node = np.zeros(b)
    graph = np.zeros(b)
    group = np.zeros(b)
    flags: list[str] = []
    if levels[0]:
        _, node, f = node_loss(emb.z_node_f, emb.z_node_s, batch.node_offsets,
                               cfg.temperature, cfg.include_positive)
        flags += f
    if levels[1]:
        if negatives == "bank":
            _, graph, f = graph_loss_banked(emb.z_graph_f, emb.z_graph_s,
                                            params.bank_f, params.bank_s,
                                            cfg.temperature, cfg.include_positive)
        else:
            _, graph, f = graph_loss(emb.z_graph_f, emb.z_graph_s,
                                     cfg.temperature, cfg.include_positive)
        flags += f
    if levels[2]:
        z = emb.z_group.data
        assigns = np.array([nearest_prototype(z[i], params.prototypes)[0]
                            for i in range(b)])
        if group_score == "negsim":
            zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), ad.NORM_EPS)
            cn = params.prototypes / np.maximum(
                np.linalg.norm(params.prototypes, axis=1, keepdims=True), ad.NORM_EPS)
            group = -(zn @ cn.T)[np.arange(b), assigns]
        else:
            _, group, f = group_loss(emb.z_group, params.prototypes,
                                     params.proto_temps, assigns,
                                     cfg.temperature, cfg.include_positive)
            flags += f
    return LevelErrors(node=node, graph=graph, group=group, flags=tuple(flags))


def ood_score_simple(errors: LevelErrors,
                     levels: tuple[bool, bool, bool] = ALL_LEVELS) -> np.ndarray:
    """Plain sum of the enabled per-level errors."""
    total = np.zeros_like(errors.node)
    for flag, term in zip(levels, (errors.node, errors.graph, errors.group)):
        if flag:
            total = total + term
    return total


def ood_score_adaptive(errors: LevelErrors, mu, sigma,
                       levels: tuple[bool, bool, bool] = ALL_LEVELS) -> np.ndarray:
    """Sum of per-level z-scores against the training error statistics.

    A level with zero training deviation carries no signal and
    contributes 0, with a warning.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    total = np.zeros_like(errors.node)
    for li, term in enumerate((errors.node, errors.graph, errors.group)):
        if not levels[li]:
            continue
        if sigma[li] > 0:
            total = total + (term - mu[li]) / sigma[li]
        else:
            log.warning("level %d has zero training deviation; its z-score is 0", li)
    return total


def auc(scores, labels) -> float:
    """Probability that an OOD score exceeds an ID score, ties at half
    credit, computed with midranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ArgumentError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Evaluation harness
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EvalReport:
    aucs: np.ndarray
    seeds: tuple[int, ...]
    mean: float
    std: float

    def summary_line(self) -> str:
        return f"AUC mean={self.mean:.9g} std={self.std:.9g} seeds={len(self.seeds)}"


def score_graphs(params: ModelParams, graphs, variant: str = "adaptive",
                 negatives: str = "batch", group_score: str = "loss",
                 levels: tuple[bool, bool, bool] = ALL_LEVELS):
    """Aggregate scores for a batch of graphs; returns (scores, errors)."""
    errors = per_sample_errors(params, graphs, negatives=negatives,
                               group_score=group_score, levels=levels)
    if variant == "adaptive":
        if params.mu is None or params.sigma is None:
            raise StateError("model has no error statistics; train before scoring")
        scores = ood_score_adaptive(errors, params.mu, params.sigma, levels=levels)
    else:
        scores = ood_score_simple(errors, levels=levels)
    return scores, errors


def write_score_csv(path, errors: LevelErrors, scores, labels=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["graph_id,label,s_node,s_graph,s_group,score"]
    for i in range(len(scores)):
        lab = "" if labels is None else str(int(labels[i]))
        lines.append(f"{i},{lab},{errors.node[i]:.9g},{errors.graph[i]:.9g},"
                     f"{errors.group[i]:.9g},{scores[i]:.9g}")
    path.write_text("\n".join(lines) + "\n")


def write_histogram_csv(path, scores, labels, bins: int = 30) -> None:
    """Per-class score histogram over shared bin edges."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    edges = np.linspace(scores.min(), scores.max(), bins + 1)
    c_id, _ = np.histogram(scores[labels == 0], bins=edges)
    c_ood, _ = np.histogram(scores[labels == 1], bins=edges)
    lines = ["bin_lo,bin_hi,count_id,count_ood"]
    for k in range(bins):
        lines.append(f"{edges[k]:.9g},{edges[k + 1]:.9g},{c_id[k]},{c_ood[k]}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_embeddings(params: ModelParams, graphs, out_prefix) -> list[Path]:
    """Projected embeddings of every space as CSV for external plotting.

    Node-space files carry a graph_id column; graph-space and group-space
    files have one row per graph.
    """
    cfg = params.cfg
    views = [build_views(g, cfg.rw_dim, cfg.degree_dim) for g in graphs]
    batch = batch_graphs(list(graphs))
    tape = ad.Tape()
    leaves = lift_params(tape, params, trainable=False)
    emb = forward_all(tape, leaves, cfg, batch, stack_structure(views))
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(name, matrix, ids):
        path = out_prefix.with_name(out_prefix.name + f"{name}.csv")
        lines = ["graph_id," + ",".join(f"c{k}" for k in range(matrix.shape[1]))]
        for i in range(matrix.shape[0]):
            lines.append(str(int(ids[i])) + "," + ",".join(f"{v:.9g}" for v in matrix[i]))
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    graph_ids = np.arange(batch.graph_count)
    dump("node_f", emb.z_node_f.data, batch.segment_ids)
    dump("node_s", emb.z_node_s.data, batch.segment_ids)
    dump("graph_f", emb.z_graph_f.data, graph_ids)
    dump("graph_s", emb.z_graph_s.data, graph_ids)
    dump("group", emb.z_group.data, graph_ids)
    return written


def evaluate(make_split, cfg: ModelConfig, tcfg: TrainConfig, base_seed: int,
             repeats: int = 5, out_dir=None, negatives: str = "batch",
             group_score: str = "loss", checkpoint_paths: bool = False) -> EvalReport:
    """Train and score once per seed base_seed..base_seed+repeats-1.

    make_split(seed) must return (train_dataset, test_graphs, labels).
    Writes one score CSV per seed when out_dir is given and reports the
    mean and sample standard deviation of the per-seed AUCs.
    """
    if repeats < 1:
        raise ArgumentError(f"repeats must be at least 1, got {repeats}")
    seeds = tuple(base_seed + r for r in range(repeats))
    aucs = []
    for seed in seeds:
        train_set, test_graphs, labels = make_split(seed)
        cfg_r = replace(cfg, seed=seed)
        tcfg_r = replace(tcfg, seed=seed)
        params, _ = train(train_set, cfg_r, tcfg_r)
        scores, errors = score_graphs(params, test_graphs, variant=tcfg.variant,
                                      negatives=negatives, group_score=group_score,
                                      levels=tcfg.levels)
        value = auc(scores, labels)
        aucs.append(value)
        log.info("seed=%d auc=%.9g", seed, value)
        if out_dir is not None:
            out = Path(out_dir)
            write_score_csv(out / f"scores_seed{seed}.csv", errors, scores, labels)
            if checkpoint_paths:
                save_checkpoint(out / f"model_seed{seed}.npz", params)
    arr = np.array(aucs)
    std = float(arr.std(ddof=1)) if repeats > 1 else 0.0
    report = EvalReport(aucs=arr, seeds=seeds, mean=float(arr.mean()), std=std)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"seed={s} auc={a:.9g}" for s, a in zip(seeds, arr)]
        lines.append(report.summary_line())
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    return report
