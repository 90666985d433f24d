"""Experiment orchestration: config files, runs, persistence.

An :class:`ExperimentConfig` captures everything needed to reproduce a
run. It round-trips through YAML (serialize -> parse -> serialize is a
fixed point) and its defaults mirror the reference hyperparameters
(window 100, 5+5 grating segments, 4 residual blocks, hidden 128, T=50,
tail fraction 0.02, vote threshold 8).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .data import (NormStats, RawSeries, fit_normalizer, load_dataset_dir,
                   windowize)
from .denoiser import (Checkpoint, DenoiserConfig, build_denoiser,
                       load_checkpoint)
from .detection import (VARIANTS, DetectionResult, EnsembleConfig,
                        detect_variant, required_train_mode)
from .diffusion import build_schedule
from .masking import MaskingConfig
from .metrics import MetricsReport, evaluate_detection
from .training import TrainConfig, train

__all__ = [
    "ScheduleSettings",
    "ModelSettings",
    "TrainSettings",
    "EnsembleSettings",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "prepare_dataset",
    "run_training",
    "run_detection",
    "run_evaluation",
    "run_ablation",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = ["dataset", "mode", "P", "R", "F1", "F1_raw",
                   "R_AUC_PR", "R_AUC_ROC", "ADD", "seed"]


@dataclass(frozen=True)
class ScheduleSettings:
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.5
    shape: str = "quadratic"

    def build(self):
        return build_schedule(self.T, self.beta_min, self.beta_max, self.shape)


@dataclass(frozen=True)
class ModelSettings:
    n_blocks: int = 4
    hidden_dim: int = 128
    n_heads: int = 8
    step_embed_dim: int = 128
    feature_embed_dim: int = 16
    time_embed_dim: int = 128
    ff_dim: int = 64

    def denoiser_config(self, n_features: int, T: int,
                        mode: str = "imputation") -> DenoiserConfig:
        return DenoiserConfig(
            n_features=n_features, T=T,
            use_spatial=mode != "no_spatial",
            use_temporal=mode != "no_temporal",
            **dataclasses.asdict(self))


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay_milestones: tuple[float, ...] = (0.75, 0.9)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-6


@dataclass(frozen=True)
class EnsembleSettings:
    tau_quantile: float = 0.02
    xi: int = 8
    n_vote_steps: int = 10
    vote_spacing: int = 3

    def build(self, T: int) -> EnsembleConfig:
        return EnsembleConfig.for_schedule(
            T, tau_quantile=self.tau_quantile, xi=self.xi,
            n_steps=self.n_vote_steps, spacing=self.vote_spacing)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "data/synthetic"
    out_dir: str = "runs"
    mode: str = "imputation"
    seeds: tuple[int, ...] = (0,)
    window: int = 100
    workers: int = 1
    chunk_size: int = 32
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)

    def __post_init__(self):
        if self.mode not in VARIANTS:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {VARIANTS}")
        if not self.seeds:
            raise ValueError("at least one seed required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        nested = {"schedule": ScheduleSettings, "masking": MaskingConfig,
                  "model": ModelSettings, "train": TrainSettings,
                  "ensemble": EnsembleSettings}
        kwargs = {}
        for key, val in raw.items():
            if key in nested:
                sub = {k: tuple(v) if isinstance(v, list) else v
                       for k, v in dict(val).items()}
                kwargs[key] = nested[key](**sub)
            elif key == "seeds":
                kwargs[key] = tuple(val)
            else:
                kwargs[key] = val
        return cls(**kwargs)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def load_config(path: str | Path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    return ExperimentConfig.from_dict(raw)


def _run_dir(cfg: ExperimentConfig, mode: str, seed: int) -> Path:
    return Path(cfg.out_dir) / mode / f"seed{seed}"


def prepare_dataset(cfg: ExperimentConfig) -> dict:
    """Validate dataset layout, fit the normalizer, write stats + summary."""
    train, test = load_dataset_dir(cfg.dataset)
    stats = fit_normalizer(train)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict()))
    summary = {
        "dataset": Path(cfg.dataset).name,
        "train_length": train.L,
        "test_length": test.L,
        "n_features": train.K,
        "anomaly_rate": float(np.mean(test.labels)),
        "filled_cells_train": train.filled_cells,
        "filled_cells_test": test.filled_cells,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _load_stats(cfg: ExperimentConfig, train: RawSeries) -> NormStats:
    stats_path = Path(cfg.out_dir) / "norm_stats.json"
    if stats_path.exists():
        return NormStats.from_dict(json.loads(stats_path.read_text()))
    return fit_normalizer(train)


def _train_config(cfg: ExperimentConfig, seed: int,
                  masking: MaskingConfig, reference_mode: str) -> TrainConfig:
    return TrainConfig(seed=seed, masking=masking,
                       reference_mode=reference_mode,
                       **dataclasses.asdict(cfg.train))


def _mode_masking(cfg: ExperimentConfig, mode: str) -> tuple[MaskingConfig, str]:
    masking = cfg.masking
    reference = "unconditional"
    if mode == "forecasting":
        masking = MaskingConfig(strategy="forecasting")
    elif mode == "reconstruction":
        masking = MaskingConfig(strategy="reconstruction")
    elif mode == "random_mask":
        masking = MaskingConfig(strategy="random",
                                miss_prob=cfg.masking.miss_prob)
    elif mode == "conditional":
        reference = "conditional"
    return masking, reference


def run_training(cfg: ExperimentConfig, seed: int,
                 mode: str | None = None, resume: str | Path | None = None,
                 log_every: int = 0) -> Path:
    """Train one model for (mode, seed); returns the final checkpoint path."""
    mode = cfg.mode if mode is None else mode
    train_mode = required_train_mode(mode)
    train_series, _ = load_dataset_dir(cfg.dataset)
    stats = _load_stats(cfg, train_series)
    sched = cfg.schedule.build()
    masking, reference = _mode_masking(cfg, train_mode)
    tcfg = _train_config(cfg, seed, masking, reference)

    out_dir = _run_dir(cfg, train_mode, seed)
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        params = ckpt.params
        sched = ckpt.schedule
        stats = ckpt.norm_stats
        start_epoch = int(ckpt.meta.get("epoch", 0))
    else:
        dcfg = cfg.model.denoiser_config(train_series.K, sched.T, train_mode)
        params = build_denoiser(dcfg, seed=seed)

    wset = windowize(train_series, stats, cfg.window)
    train(params, wset.windows, tcfg, sched, out_dir=out_dir,
          norm_stats=stats, meta={"mode": train_mode, "dataset": cfg.dataset},
          start_epoch=start_epoch, log_every=log_every)
    return out_dir / "checkpoint_final.pt"


def run_detection(cfg: ExperimentConfig, checkpoint_path: str | Path,
                  seed: int, mode: str | None = None) -> Path:
    """Detect over the test split; writes and returns predictions.csv."""
    mode = cfg.mode if mode is None else mode
    ckpt = load_checkpoint(checkpoint_path)
    _, test = load_dataset_dir(cfg.dataset)
    ecfg = cfg.ensemble.build(ckpt.schedule.T)
    masking = MaskingConfig.from_dict(ckpt.meta["masking"]) \
        if "masking" in ckpt.meta else cfg.masking
    result = detect_variant(
        mode, ckpt.params, test, ckpt.norm_stats, ckpt.schedule, ecfg,
        masking, seed=seed, window=cfg.window,
        checkpoint_mode=ckpt.meta.get("mode"), chunk_size=cfg.chunk_size)
    out_dir = _run_dir(cfg, mode, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "predictions.csv"
    pd.DataFrame({
        "timestamp": np.arange(test.L),
        "score": result.score,
        "votes": result.votes,
        "label": result.labels,
    }).to_csv(path, index=False)
    return path


def run_evaluation(cfg: ExperimentConfig, predictions_path: str | Path,
                   seed: int, mode: str | None = None,
                   plot: bool = False) -> MetricsReport:
    """Score predictions against labels; append a metrics.csv row."""
    mode = cfg.mode if mode is None else mode
    _, test = load_dataset_dir(cfg.dataset)
    preds = pd.read_csv(predictions_path)
    if len(preds) != test.L:
        raise ValueError(
            f"predictions have {len(preds)} rows, labels {test.L}")
    report = evaluate_detection(preds["label"].to_numpy(),
                                preds["score"].to_numpy(), test.labels)
    row = {
        "dataset": Path(cfg.dataset).name, "mode": mode,
        "P": report.precision, "R": report.recall, "F1": report.f1,
        "F1_raw": report.f1_raw, "R_AUC_PR": report.r_auc_pr,
        "R_AUC_ROC": report.r_auc_roc, "ADD": report.add, "seed": seed,
    }
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    frame = pd.DataFrame([row], columns=METRICS_COLUMNS)
    if metrics_path.exists():
        frame = pd.concat([pd.read_csv(metrics_path), frame],
                          ignore_index=True)
    frame.to_csv(metrics_path, index=False)
    _write_summary(frame, out / "metrics_summary.csv")
    if plot:
        _plot_detection(preds, test, out / f"detection_{mode}_seed{seed}.png")
    return report


def _write_summary(frame: pd.DataFrame, path: Path) -> None:
    """Mean and std across seeds for every (dataset, mode)."""
    numeric = ["P", "R", "F1", "F1_raw", "R_AUC_PR", "R_AUC_ROC", "ADD"]
    grouped = frame.groupby(["dataset", "mode"])[numeric]
    summary = grouped.agg(["mean", "std"])
    summary.columns = [f"{col}_{stat}" for col, stat in summary.columns]
    summary.reset_index().to_csv(path, index=False)


def _plot_detection(preds: pd.DataFrame, test: RawSeries, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(3, 1, figsize=(12, 7), sharex=True)
    axes[0].plot(preds["score"], lw=0.8)
    axes[0].set_ylabel("score")
    axes[1].plot(preds["votes"], lw=0.8, color="tab:orange")
    axes[1].set_ylabel("votes")
    axes[2].plot(preds["label"], lw=0.8, label="predicted")
    if test.labels is not None:
        axes[2].plot(test.labels * 0.8, lw=0.8, label="truth")
    axes[2].set_ylabel("label")
    axes[2].legend(loc="upper right")
    axes[2].set_xlabel("timestamp")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_ablation(cfg: ExperimentConfig,
                 variants: tuple[str, ...] = VARIANTS,
                 log_every: int = 0) -> pd.DataFrame:
    """Run every variant with shared seeds into one consolidated table.

    Checkpoints are shared between variants that use the same training
    mode. Per-variant failures are isolated so a partial table still
    comes out.
    """
    rows = []
    checkpoints: dict[tuple[str, int], Path] = {}
    for variant in variants:
        for seed in cfg.seeds:
            key = (required_train_mode(variant), seed)
            try:
                if key not in checkpoints:
                    checkpoints[key] = run_training(
                        cfg, seed, mode=variant, log_every=log_every)
                pred = run_detection(cfg, checkpoints[key], seed, mode=variant)
                report = run_evaluation(cfg, pred, seed, mode=variant)
                rows.append({
                    "variant": variant, "seed": seed, "P": report.precision,
                    "R": report.recall, "F1": report.f1,
                    "R_AUC_PR": report.r_auc_pr, "ADD": report.add,
                    "error": "",
                })
            except Exception as exc:  # noqa: BLE001 - isolate variant failures
                rows.append({"variant": variant, "seed": seed, "P": np.nan,
                             "R": np.nan, "F1": np.nan, "R_AUC_PR": np.nan,
                             "ADD": np.nan, "error": f"{type(exc).__name__}: {exc}"})
    table = pd.DataFrame(rows)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "ablation_runs.csv", index=False)
    ok = table[table["error"] == ""]
    if len(ok):
        agg = ok.groupby("variant", sort=False)[
            ["P", "R", "F1", "R_AUC_PR", "ADD"]].mean().reset_index()
    else:
        agg = pd.DataFrame(columns=["variant", "P", "R", "F1", "R_AUC_PR", "ADD"])
    agg.to_csv(out / "ablation_table.csv", index=False)
    return table
