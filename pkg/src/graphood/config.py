"""Experiment configuration: flat key = value files with sections.

Unknown sections or keys are rejected by name, and a run's resolved
configuration can be serialized back verbatim, so every experiment
directory is reproducible from the file it contains.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .encoder import ModelConfig
from .errors import ConfigError
from .graphdata import SplitSpec
from .trainer import TrainConfig

ENV_DATA_DIR = "GOODD_DATA_DIR"


@dataclass(frozen=True)
class RunConfig:
    # [data]
    data_kind: str = "synthetic"          # synthetic | tu
    data_root: str = ""                   # falls back to $GOODD_DATA_DIR
    id_name: str = ""                     # TU dataset names for the ood mode
    ood_name: str = ""
    dataset_name: str = ""                # single TU dataset for anomaly mode
    n_graphs: int = 120                   # per-set size for synthetic data
    # [split]
    mode: str = "ood"                     # ood | anomaly
    train_fraction: float = 0.9
    # [model]
    layers: int = 2
    hidden_dim: int = 16
    proj_layers: int = 2
    proj_dim: int = 0                     # 0 means layers * hidden_dim
    temperature: float = 0.2
    clusters: int = 10
    alpha: float = 0.2
    rw_dim: int = 16
    degree_dim: int = 32
    include_positive: bool = False
    # [train]
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    variant: str = "adaptive"             # adaptive | simp
    # [score]
    negatives: str = "batch"              # batch | bank
    group_score: str = "loss"             # loss | negsim
    # [run]
    out_dir: str = "out"
    seed: int = 0
    repeats: int = 5

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            layers=self.layers, hidden_dim=self.hidden_dim,
            proj_layers=self.proj_layers,
            proj_dim=None if self.proj_dim == 0 else self.proj_dim,
            temperature=self.temperature, clusters=self.clusters,
            alpha=self.alpha, seed=self.seed, rw_dim=self.rw_dim,
            degree_dim=self.degree_dim, include_positive=self.include_positive,
        )

    def train_config(self, levels=(True, True, True)) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, alpha=self.alpha, variant=self.variant,
            seed=self.seed, levels=tuple(levels),
        )

    def split_spec(self, seed: int | None = None) -> SplitSpec:
        mode = "ood_pair" if self.mode == "ood" else "anomaly"
        return SplitSpec(train_fraction=self.train_fraction,
                         seed=self.seed if seed is None else seed, mode=mode)

    def resolved_data_root(self) -> str:
        return self.data_root or os.environ.get(ENV_DATA_DIR, "")


_SECTIONS: dict[str, dict[str, str]] = {
    "data": {"kind": "data_kind", "root": "data_root", "id_name": "id_name",
             "ood_name": "ood_name", "name": "dataset_name", "n_graphs": "n_graphs"},
    "split": {"mode": "mode", "train_fraction": "train_fraction"},
    "model": {"layers": "layers", "hidden_dim": "hidden_dim",
              "proj_layers": "proj_layers", "proj_dim": "proj_dim",
              "temperature": "temperature", "clusters": "clusters",
              "alpha": "alpha", "rw_dim": "rw_dim", "degree_dim": "degree_dim",
              "include_positive": "include_positive"},
    "train": {"epochs": "epochs", "batch_size": "batch_size",
              "learning_rate": "learning_rate", "beta1": "beta1", "beta2": "beta2",
              "adam_eps": "adam_eps", "variant": "variant"},
    "score": {"negatives": "negatives", "group_score": "group_score"},
    "run": {"out_dir": "out_dir", "seed": "seed", "repeats": "repeats"},
}

_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False}


def _coerce(field_name: str, raw: str):
    ftype = RunConfig.__dataclass_fields__[field_name].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() not in _BOOL_VALUES:
                raise ValueError
            return _BOOL_VALUES[raw.lower()]
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"key {field_name!r}: cannot parse {raw!r} as {ftype}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            field_name = _SECTIONS[section][key]
            values[field_name] = _coerce(field_name, raw)
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.data_kind not in ("synthetic", "tu"):
        raise ConfigError(f"key 'kind': must be synthetic or tu, got {cfg.data_kind!r}")
    if cfg.mode not in ("ood", "anomaly"):
        raise ConfigError(f"key 'mode': must be ood or anomaly, got {cfg.mode!r}")
    if cfg.variant not in ("adaptive", "simp"):
        raise ConfigError(f"key 'variant': must be adaptive or simp, got {cfg.variant!r}")
    if cfg.negatives not in ("batch", "bank"):
        raise ConfigError(f"key 'negatives': must be batch or bank, got {cfg.negatives!r}")
    if cfg.group_score not in ("loss", "negsim"):
        raise ConfigError(f"key 'group_score': must be loss or negsim, "
                          f"got {cfg.group_score!r}")
    if not (0.0 < cfg.train_fraction <= 1.0):
        raise ConfigError(f"key 'train_fraction': must be in (0, 1], "
                          f"got {cfg.train_fraction}")
    if cfg.repeats < 1:
        raise ConfigError(f"key 'repeats': must be at least 1, got {cfg.repeats}")
    if cfg.data_kind == "tu" and cfg.mode == "ood" and not (cfg.id_name and cfg.ood_name):
        raise ConfigError("keys 'id_name' and 'ood_name' are required for tu data "
                          "in ood mode")
    if cfg.data_kind == "tu" and cfg.mode == "anomaly" and not cfg.dataset_name:
        raise ConfigError("key 'name' is required for tu data in anomaly mode")


def config_text(cfg: RunConfig) -> str:
    """Serialize back to the file format; load(config_text(c)) == c."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key, field_name in keys.items():
            val = getattr(cfg, field_name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


def write_resolved_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved.cfg"
    path.write_text(config_text(cfg))
    return path


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    clean = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(clean) - known
    if unknown:
        raise ConfigError(f"unknown override keys: {sorted(unknown)}")
    cfg = replace(cfg, **clean)
    validate_config(cfg)
    return cfg
