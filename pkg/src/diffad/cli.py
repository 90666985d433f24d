"""Command-line entry points: prepare, train, detect, evaluate, ablate.

Configuration comes from a YAML file (see ``ExperimentConfig``); flags
and ``DIFFAD_*`` environment variables override file values. Nested
fields use double underscores, e.g. ``DIFFAD_TRAIN__EPOCHS=5``.

Errors exit nonzero and print a machine-readable category prefix on
stderr: ``usage:``, ``config:``, ``data:``, ``checkpoint:`` or
``internal:``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch
import yaml

from .data import DataError
from .experiment import (ExperimentConfig, load_config, prepare_dataset,
                         run_ablation, run_detection, run_evaluation,
                         run_training, save_config)

ENV_PREFIX = "DIFFAD_"

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5,
              "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _apply_overrides(raw: dict, pairs: list[tuple[str, str]]) -> dict:
    for dotted, text in pairs:
        keys = dotted.lower().split("__")
        node = raw
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise CliError("config", f"unknown config section {key!r}")
            node = node[key]
        if keys[-1] not in node:
            raise CliError("config", f"unknown config field {dotted!r}")
        node[keys[-1]] = yaml.safe_load(text)
    return raw


def _env_overrides() -> list[tuple[str, str]]:
    out = []
    for name, value in sorted(os.environ.items()):
        if name.startswith(ENV_PREFIX):
            out.append((name[len(ENV_PREFIX):], value))
    return out


def _load(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists():
        raise CliError("config", f"no config file at {path}")
    try:
        raw = yaml.safe_load(path.read_text())
        raw = _apply_overrides(raw, _env_overrides())
        if args.out:
            raw["out_dir"] = args.out
        if args.seed is not None:
            raw["seeds"] = [args.seed]
        if args.workers is not None:
            raw["workers"] = args.workers
        cfg = ExperimentConfig.from_dict(raw)
    except CliError:
        raise
    except (TypeError, ValueError, yaml.YAMLError) as exc:
        raise CliError("config", str(exc)) from exc
    torch.set_num_threads(max(1, cfg.workers))
    return cfg


def cmd_init(args) -> int:
    save_config(ExperimentConfig(), args.config)
    print(f"wrote default config to {args.config}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _load(args)
    summary = prepare_dataset(cfg)
    for key, val in summary.items():
        print(f"{key}: {val}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    for seed in cfg.seeds:
        path = run_training(cfg, seed, resume=args.resume,
                            log_every=args.log_every)
        print(f"checkpoint: {path}")
    return 0


def cmd_detect(args) -> int:
    cfg = _load(args)
    for seed in cfg.seeds:
        ckpt = args.checkpoint or str(
            Path(cfg.out_dir) / cfg.mode / f"seed{seed}" / "checkpoint_final.pt")
        path = run_detection(cfg, ckpt, seed)
        print(f"predictions: {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    for seed in cfg.seeds:
        pred = args.predictions or str(
            Path(cfg.out_dir) / cfg.mode / f"seed{seed}" / "predictions.csv")
        report = run_evaluation(cfg, pred, seed, plot=args.plot)
        print(f"seed {seed}: F1={report.f1:.4f} P={report.precision:.4f} "
              f"R={report.recall:.4f} R-AUC-PR={report.r_auc_pr:.4f} "
              f"ADD={report.add:.1f}")
    print(f"metrics: {Path(cfg.out_dir) / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    table = run_ablation(cfg, log_every=args.log_every)
    failures = table[table["error"] != ""]
    print(table.to_string(index=False))
    print(f"table: {Path(cfg.out_dir) / 'ablation_table.csv'}")
    return 0 if failures.empty else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffad",
        description="Diffusion-imputation anomaly detection for "
                    "multivariate time series")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed list with one seed")
        p.add_argument("--workers", type=int, default=None,
                       help="compute threads for window-parallel math")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("init", help="write a default config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("prepare", help="validate dataset and fit normalizer")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model per configured seed")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run ensemble inference on the test split")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    common(p)
    p.add_argument("--predictions", default=None)
    p.add_argument("--plot", action="store_true",
                   help="write a score/votes/labels plot")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the full variant matrix")
    common(p)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except FileNotFoundError as exc:
        print(f"checkpoint: {exc}", file=sys.stderr)
        return EXIT_CODES["checkpoint"]
    except DataError as exc:
        print(f"data: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]
    except (ValueError, RuntimeError) as exc:
        print(f"internal: {exc}", file=sys.stderr)
        return EXIT_CODES["internal"]


if __name__ == "__main__":
    sys.exit(main())
