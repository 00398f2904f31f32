"""Command-line entry point and experiment orchestration.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff
from .config import (ENV_DATA_DIR, RunConfig, apply_overrides, load_config,
                     write_resolved_config)
from .contrast import loss_gradcheck_suite
from .encoder import load_checkpoint, save_checkpoint
from .errors import ArgumentError, ConfigError, NumericalError, ParseError, StateError
from .graphdata import generate_synthetic_pair, parse_tu_dataset, split_anomaly, split_ood
from .scoring import (auc, evaluate, export_embeddings, score_graphs,
                      write_histogram_csv, write_score_csv)
from .trainer import train

log = logging.getLogger(__name__)

ABLATION_ROWS = [(True, False, False), (False, True, False), (False, False, True),
                 (True, True, False), (True, False, True), (False, True, True),
                 (True, True, True)]

K_SWEEP_DEFAULT = "2,3,5,10,15,20,30"
ALPHA_SWEEP_DEFAULT = "0,0.2,0.4,0.6,0.8,1.0"


def _load_datasets(cfg: RunConfig):
    if cfg.data_kind == "synthetic":
        if cfg.mode == "anomaly":
            raise ConfigError("anomaly mode requires a labeled tu dataset")
        return generate_synthetic_pair(cfg.n_graphs, cfg.seed)
    root = cfg.resolved_data_root()
    if not root:
        raise ConfigError(f"no data root configured; set [data] root or {ENV_DATA_DIR}")
    if cfg.mode == "ood":
        id_ds = parse_tu_dataset(Path(root) / cfg.id_name, cfg.id_name)
        ood_ds = parse_tu_dataset(Path(root) / cfg.ood_name, cfg.ood_name)
        return id_ds, ood_ds
    ds = parse_tu_dataset(Path(root) / cfg.dataset_name, cfg.dataset_name)
    return ds, None


def make_split_fn(cfg: RunConfig):
    """Returns split(seed) -> (train_set, test_graphs, labels); datasets
    are loaded once and re-split per seed.
    """
    primary, secondary = _load_datasets(cfg)

    def split(seed: int):
        spec = cfg.split_spec(seed)
        if cfg.mode == "ood":
            train_set, test_set, labels = split_ood(primary, secondary, spec)
        else:
            train_set, test_set, labels = split_anomaly(primary, spec)
        return train_set, test_set.graphs, labels

    return split


def _setup_run_dir(cfg: RunConfig, out_override: str | None) -> Path:
    if out_override:
        cfg = replace(cfg, out_dir=out_override)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    return out


def _attach_run_log(out_dir: Path):
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    handler.setLevel(logging.INFO)
    root = logging.getLogger("graphood")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _config_with_overrides(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "score_neg", None):
        overrides["negatives"] = args.score_neg
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return apply_overrides(cfg, **overrides)


def cmd_train(args) -> int:
    cfg = _config_with_overrides(args)
    out = _setup_run_dir(cfg, None)
    handler = _attach_run_log(out)
    try:
        split = make_split_fn(cfg)
        train_set, _, _ = split(cfg.seed)
        params, _ = train(train_set, cfg.model_config(), cfg.train_config())
        save_checkpoint(out / "checkpoint.npz", params)
    finally:
        logging.getLogger("graphood").removeHandler(handler)
        handler.close()
    print(f"checkpoint written to {out / 'checkpoint.npz'}")
    return 0


def cmd_score(args) -> int:
    cfg = _config_with_overrides(args)
    out = _setup_run_dir(cfg, None)
    params = load_checkpoint(args.checkpoint)
    split = make_split_fn(cfg)
    _, test_graphs, labels = split(cfg.seed)
    variant = args.variant or params.meta.get("variant", cfg.variant)
    scores, errors = score_graphs(params, test_graphs, variant=variant,
                                  negatives=cfg.negatives, group_score=cfg.group_score)
    write_score_csv(out / "scores.csv", errors, scores, labels)
    print(f"scores written to {out / 'scores.csv'}")
    if labels is not None:
        print(f"AUC {auc(scores, labels):.9g}")
    if args.export_histogram:
        write_histogram_csv(out / "score_histogram.csv", scores, labels)
    if args.export_embeddings:
        export_embeddings(params, test_graphs, out / "emb_")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_with_overrides(args)
    out = _setup_run_dir(cfg, None)
    handler = _attach_run_log(out)
    try:
        split = make_split_fn(cfg)
        report = evaluate(split, cfg.model_config(), cfg.train_config(),
                          base_seed=cfg.seed, repeats=cfg.repeats, out_dir=out,
                          negatives=cfg.negatives, group_score=cfg.group_score)
    finally:
        logging.getLogger("graphood").removeHandler(handler)
        handler.close()
    print(report.summary_line())
    return 0


def cmd_ablate(args) -> int:
    """AUC for every nonempty subset of the three contrast levels, on the
    unweighted variant so the adaptive mechanism cannot mask a level.
    """
    cfg = _config_with_overrides(args)
    cfg = replace(cfg, variant="simp")
    out = _setup_run_dir(cfg, None)
    split = make_split_fn(cfg)
    lines = ["node,graph,group,auc_mean,auc_std"]
    results = []
    for levels in ABLATION_ROWS:
        row_dir = out / ("ablate_" + "".join("ngr"[i] for i in range(3) if levels[i]))
        report = evaluate(split, cfg.model_config(), cfg.train_config(levels=levels),
                          base_seed=cfg.seed, repeats=cfg.repeats, out_dir=row_dir,
                          negatives=cfg.negatives, group_score=cfg.group_score)
        results.append((levels, report))
        flags = ",".join("x" if on else "-" for on in levels)
        lines.append(f"{flags},{report.mean:.9g},{report.std:.9g}")
        print(lines[-1])
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_with_overrides(args)
    out = _setup_run_dir(cfg, None)
    raw = args.values or (K_SWEEP_DEFAULT if args.param == "K" else ALPHA_SWEEP_DEFAULT)
    try:
        values = [int(v) if args.param == "K" else float(v) for v in raw.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse sweep values {raw!r}") from None
    split = make_split_fn(cfg)
    lines = [f"{args.param},auc_mean,auc_std"]
    for value in values:
        if args.param == "K":
            run_cfg = replace(cfg, clusters=value)
        else:
            run_cfg = replace(cfg, alpha=value)
        report = evaluate(split, run_cfg.model_config(), run_cfg.train_config(),
                          base_seed=cfg.seed, repeats=cfg.repeats,
                          out_dir=out / f"sweep_{args.param}_{value}",
                          negatives=cfg.negatives, group_score=cfg.group_score)
        lines.append(f"{value},{report.mean:.9g},{report.std:.9g}")
        print(lines[-1])
    (out / f"sweep_{args.param}.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    reports = autodiff.op_gradcheck_suite(instances=args.instances, seed=args.seed or 0)
    reports += loss_gradcheck_suite(instances=args.instances, seed=args.seed or 0)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}")
        return 3
    print(f"all {len(reports)} gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphood",
                                     description="graph-level OOD detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", choices=("adaptive", "simp"), default=None)
        p.add_argument("--mode", choices=("ood", "anomaly"), default=None)
        p.add_argument("--score-neg", dest="score_neg", choices=("batch", "bank"),
                       default=None)
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("score", help="score the test split with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--export-embeddings", action="store_true")
    p.add_argument("--export-histogram", action="store_true")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="repeated train+score protocol")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="AUC for each loss-combination row")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="AUC across one hyperparameter")
    common(p)
    p.add_argument("--param", choices=("K", "alpha"), required=True)
    p.add_argument("--values", default=None, help="comma-separated list")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, ArgumentError, StateError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
