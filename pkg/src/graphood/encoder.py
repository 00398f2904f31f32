"""Dual GIN encoders, sum readout, projection heads, checkpoint IO.

The feature-view and structure-view encoders have identical shapes but
fully independent weights. Each GIN layer applies a two-layer
perceptron to h + A h (epsilon fixed at 0), and the node embedding is
the concatenation of all layer outputs, width layers * hidden_dim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ArgumentError, ShapeError, StateError
from .graphdata import BatchedGraph
from .npzio import load_npz, save_npz

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden_dim: int = 16
    proj_layers: int = 2
    proj_dim: int | None = None      # defaults to layers * hidden_dim
    temperature: float = 0.2
    clusters: int = 10
    alpha: float = 0.5
    seed: int = 0
    rw_dim: int = 16                 # structure-view widths; the checkpoint
    degree_dim: int = 32             # needs them to encode unseen graphs
    include_positive: bool = False   # standard InfoNCE denominator if set

    @property
    def embed_dim(self) -> int:
        return self.layers * self.hidden_dim

    @property
    def projection_dim(self) -> int:
        return self.proj_dim if self.proj_dim is not None else self.embed_dim

    def validate(self) -> None:
        if self.layers < 1:
            raise ArgumentError(f"layers must be at least 1, got {self.layers}")
        if self.hidden_dim < 1:
            raise ArgumentError(f"hidden_dim must be at least 1, got {self.hidden_dim}")
        if self.proj_layers < 1:
            raise ArgumentError(f"proj_layers must be at least 1, got {self.proj_layers}")
        if self.temperature <= 0:
            raise ArgumentError(f"temperature must be positive, got {self.temperature}")
        if self.clusters < 2:
            raise ArgumentError(f"clusters must be at least 2, got {self.clusters}")
        if self.alpha < 0:
            raise ArgumentError(f"alpha must be nonnegative, got {self.alpha}")
        if self.rw_dim < 1 or self.degree_dim < 1:
            raise ArgumentError("rw_dim and degree_dim must be at least 1")


HEAD_NAMES = ("head_node_f", "head_node_s", "head_graph_f", "head_graph_s", "head_group")


@dataclass(eq=False)
class ModelParams:
    cfg: ModelConfig
    d_f: int
    d_s: int
    tensors: dict[str, np.ndarray]            # trainable, in fixed order
    prototypes: np.ndarray | None = None      # (K, d_p) cluster centers
    proto_temps: np.ndarray | None = None     # (K,) per-cluster temperatures
    mu: np.ndarray | None = None              # (3,) node/graph/group error means
    sigma: np.ndarray | None = None           # (3,) matching deviations
    bank_f: np.ndarray | None = None          # reference negatives, feature view
    bank_s: np.ndarray | None = None          # reference negatives, structure view
    meta: dict = field(default_factory=dict)


@dataclass(eq=False)
class Embeddings:
    node_f: Tensor
    node_s: Tensor
    graph_f: Tensor
    graph_s: Tensor
    z_node_f: Tensor
    z_node_s: Tensor
    z_graph_f: Tensor
    z_graph_s: Tensor
    z_group: Tensor


def _layer_shapes(cfg: ModelConfig, d_f: int, d_s: int) -> list[tuple[str, tuple[int, int]]]:
    d_h, d_p = cfg.hidden_dim, cfg.projection_dim
    shapes: list[tuple[str, tuple[int, int]]] = []
    for enc, d_in in (("enc_f", d_f), ("enc_s", d_s)):
        for l in range(cfg.layers):
            w_in = d_in if l == 0 else d_h
            shapes += [(f"{enc}.l{l}.w1", (w_in, d_h)), (f"{enc}.l{l}.b1", (1, d_h)),
                       (f"{enc}.l{l}.w2", (d_h, d_h)), (f"{enc}.l{l}.b2", (1, d_h))]
    head_inputs = {"head_node_f": cfg.embed_dim, "head_node_s": cfg.embed_dim,
                   "head_graph_f": cfg.embed_dim, "head_graph_s": cfg.embed_dim,
                   "head_group": 2 * cfg.embed_dim}
    for head in HEAD_NAMES:
        for l in range(cfg.proj_layers):
            w_in = head_inputs[head] if l == 0 else d_p
            shapes += [(f"{head}.l{l}.w", (w_in, d_p)), (f"{head}.l{l}.b", (1, d_p))]
    return shapes


def init_params(cfg: ModelConfig, d_f: int, d_s: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by cfg.seed."""
    cfg.validate()
    if d_f < 1 or d_s < 1:
        raise ArgumentError(f"input widths must be positive, got d_f={d_f}, d_s={d_s}")
    rng = np.random.default_rng(cfg.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _layer_shapes(cfg, d_f, d_s):
        if name.endswith(("b1", "b2", ".b")):
            tensors[name] = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(cfg=cfg, d_f=d_f, d_s=d_s, tensors=tensors)


def lift_params(tape: Tape, params: ModelParams, trainable: bool = False) -> dict[str, Tensor]:
    return {name: tape.leaf(arr, requires_grad=trainable)
            for name, arr in params.tensors.items()}


def gin_forward(tape: Tape, leaves: dict[str, Tensor], enc: str,
                batch: BatchedGraph, x: Tensor, layers: int) -> Tensor:
    """Run one GIN encoder; returns the per-layer concatenation."""
    first_w = leaves[f"{enc}.l0.w1"]
    if x.shape[1] != first_w.shape[0]:
        raise ShapeError(f"{enc} expects input width {first_w.shape[0]}, got {x.shape[1]}")
    csr, csr_t = batch.adjacency_csr()
    h = x
    outs = []
    for l in range(layers):
        agg = h + ad.spmm(batch.rows, batch.cols, batch.n_total, h, csr=csr, csr_t=csr_t)
        z = ad.bias_add(agg @ leaves[f"{enc}.l{l}.w1"], leaves[f"{enc}.l{l}.b1"])
        z = ad.relu(z)
        h = ad.bias_add(z @ leaves[f"{enc}.l{l}.w2"], leaves[f"{enc}.l{l}.b2"])
        outs.append(h)
    return outs[0] if len(outs) == 1 else ad.hstack(outs)


def readout(node_emb: Tensor, segment_ids: np.ndarray, graph_count: int) -> Tensor:
    """Sum pooling of node embeddings per graph."""
    return ad.segment_sum(node_emb, segment_ids, graph_count)


def project(tape: Tape, leaves: dict[str, Tensor], head: str,
            x: Tensor, proj_layers: int) -> Tensor:
    """Perceptron head: linear/ReLU pairs with a final plain linear."""
    h = x
    for l in range(proj_layers):
        h = ad.bias_add(h @ leaves[f"{head}.l{l}.w"], leaves[f"{head}.l{l}.b"])
        if l < proj_layers - 1:
            h = ad.relu(h)
    return h


def forward_all(tape: Tape, leaves: dict[str, Tensor], cfg: ModelConfig,
                batch: BatchedGraph, structure: np.ndarray) -> Embeddings:
    """Both encoders, readout, and the five projection heads."""
    x_f = tape.constant(batch.features)
    x_s = tape.constant(structure)
    node_f = gin_forward(tape, leaves, "enc_f", batch, x_f, cfg.layers)
    node_s = gin_forward(tape, leaves, "enc_s", batch, x_s, cfg.layers)
    graph_f = readout(node_f, batch.segment_ids, batch.graph_count)
    graph_s = readout(node_s, batch.segment_ids, batch.graph_count)
    return Embeddings(
        node_f=node_f, node_s=node_s, graph_f=graph_f, graph_s=graph_s,
        z_node_f=project(tape, leaves, "head_node_f", node_f, cfg.proj_layers),
        z_node_s=project(tape, leaves, "head_node_s", node_s, cfg.proj_layers),
        z_graph_f=project(tape, leaves, "head_graph_f", graph_f, cfg.proj_layers),
        z_graph_s=project(tape, leaves, "head_graph_s", graph_s, cfg.proj_layers),
        z_group=project(tape, leaves, "head_group", ad.hstack([graph_f, graph_s]),
                        cfg.proj_layers),
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams) -> None:
    """Write every parameter, the prototype state, and the error stats.

    The container is a deterministic npz: identical params give
    byte-identical files, and a load/save round trip is exact.
    """
    cfg_dict = {k: getattr(params.cfg, k) for k in ModelConfig.__dataclass_fields__}
    meta = {"version": CHECKPOINT_VERSION, "config": cfg_dict,
            "d_f": params.d_f, "d_s": params.d_s, **params.meta}
    arrays: dict[str, np.ndarray] = {
        "meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    for name, arr in params.tensors.items():
        arrays[f"param::{name}"] = arr
    for attr in ("prototypes", "proto_temps", "mu", "sigma", "bank_f", "bank_s"):
        val = getattr(params, attr)
        if val is not None:
            arrays[f"state::{attr}"] = val
    save_npz(path, arrays)


def load_checkpoint(path) -> ModelParams:
    data = load_npz(path)
    if "meta_json" not in data:
        raise StateError(f"{path}: not a model checkpoint")
    meta = json.loads(bytes(data["meta_json"]).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig(**meta["config"])
    tensors = {k[len("param::"):]: data[k] for k in data if k.startswith("param::")}
    expected = [name for name, _ in _layer_shapes(cfg, meta["d_f"], meta["d_s"])]
    if set(expected) != set(tensors):
        raise StateError(f"{path}: parameter set does not match the stored config")
    params = ModelParams(cfg=cfg, d_f=meta["d_f"], d_s=meta["d_s"],
                         tensors={name: tensors[name] for name in expected})
    for attr in ("prototypes", "proto_temps", "mu", "sigma", "bank_f", "bank_s"):
        key = f"state::{attr}"
        if key in data:
            setattr(params, attr, data[key])
    params.meta = {k: v for k, v in meta.items()
                   if k not in ("version", "config", "d_f", "d_s")}
    return params


def clone_params(params: ModelParams) -> ModelParams:
    return replace(
        params,
        tensors={k: v.copy() for k, v in params.tensors.items()},
        prototypes=None if params.prototypes is None else params.prototypes.copy(),
        proto_temps=None if params.proto_temps is None else params.proto_temps.copy(),
        mu=None if params.mu is None else params.mu.copy(),
        sigma=None if params.sigma is None else params.sigma.copy(),
        bank_f=None if params.bank_f is None else params.bank_f.copy(),
        bank_s=None if params.bank_s is None else params.bank_s.copy(),
        meta=dict(params.meta),
    )
