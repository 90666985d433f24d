"""Self-supervised training: masked noise-prediction over corrupted windows.

Each optimizer step draws a corruption depth per sample, corrupts the
window, runs the network on (masked channel, reference channel) and
minimizes the squared noise-prediction error over masked cells only,
normalized by the masked-cell count. Complementary mask passes of one
window are folded into the same batch.

All randomness flows from an explicit numpy generator, so runs with equal
seeds reproduce losses exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MtsWindow, NormStats
from .denoiser import Checkpoint, DenoiserParams, save_checkpoint
from .diffusion import NoiseSchedule
from .masking import MaskPair, MaskingConfig

__all__ = [
    "TrainConfig",
    "TrainRecord",
    "TrainingDivergedError",
    "Trainer",
    "training_step",
    "train",
]

REFERENCE_MODES = ("unconditional", "conditional")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay_milestones: tuple[float, ...] = (0.75, 0.9)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-6
    seed: int = 0
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    reference_mode: str = "unconditional"
    loss_reduction: str = "masked_mean"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"unknown reference_mode {self.reference_mode!r}")
        if self.loss_reduction != "masked_mean":
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    seconds: float
    policy_cells: dict[int, int] = field(default_factory=dict)


def make_reference(x0: np.ndarray, mask: np.ndarray, sqrt_ab, sqrt_1m_ab,
                   eps_ref: np.ndarray, reference_mode: str) -> np.ndarray:
    """Observed-cell reference channel.

    Unconditional mode carries the observed values through the forward
    corruption (their ground-truth noise applied), so exact values are
    never exposed; conditional mode provides the raw values directly.
    """
    if reference_mode == "conditional":
        return x0 * mask
    return (sqrt_ab * x0 + sqrt_1m_ab * eps_ref) * mask


class Trainer:
    """Owns the optimizer state and the training random stream."""

    def __init__(self, params: DenoiserParams, sched: NoiseSchedule,
                 cfg: TrainConfig):
        if sched.T != params.config.T:
            raise ValueError(
                f"schedule T={sched.T} differs from model T={params.config.T}")
        self.params = params
        self.sched = sched
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(
            params.module.parameters(), lr=cfg.learning_rate,
            weight_decay=cfg.weight_decay)
        self.epoch = 0

    def batch_loss(self, x0: np.ndarray,
                   passes: list[tuple[np.ndarray, int]],
                   rng: np.random.Generator) -> tuple[torch.Tensor, dict[int, int]]:
        """Differentiable masked noise-prediction loss for a batch.

        ``x0`` is (B, W, K); each pass supplies observed masks broadcastable
        to that shape plus a policy id. Returns the loss and the number of
        masked cells that contributed, keyed by policy.
        """
        B, W, K = x0.shape
        chunks = {"masked": [], "ref": [], "t": [], "p": [], "target": [],
                  "missing": []}
        policies = []
        for mask, policy in passes:
            t = rng.integers(1, self.sched.T + 1, size=B)
            eps = rng.standard_normal((B, W, K))
            eps_ref = rng.standard_normal((B, W, K))
            sqrt_ab = np.sqrt(self.sched.alpha_bar[t - 1])[:, None, None]
            sqrt_1m = np.sqrt(1.0 - self.sched.alpha_bar[t - 1])[:, None, None]
            corrupted = sqrt_ab * x0 + sqrt_1m * eps
            missing = np.broadcast_to(1 - mask, x0.shape)
            chunks["masked"].append(corrupted * missing)
            chunks["ref"].append(make_reference(
                x0, 1 - missing, sqrt_ab, sqrt_1m, eps_ref,
                self.cfg.reference_mode))
            chunks["t"].append(t)
            chunks["p"].append(np.full(B, policy))
            chunks["target"].append(eps)
            chunks["missing"].append(missing)
            policies.append(policy)

        dtype = self.params.dtype
        as_t = lambda key: torch.from_numpy(
            np.concatenate(chunks[key]).astype(np.float64)).to(dtype)
        masked, ref, target, missing_all = (
            as_t("masked"), as_t("ref"), as_t("target"), as_t("missing"))
        t_all = torch.from_numpy(np.concatenate(chunks["t"])).long()
        p_all = torch.from_numpy(np.concatenate(chunks["p"])).long()

        eps_hat = self.params.module(masked, ref, t_all, p_all,
                                     torch.arange(W), torch.arange(K))
        sq = ((target - eps_hat) * missing_all) ** 2

        cells: dict[int, int] = {}
        for i, policy in enumerate(policies):
            n = int(missing_all[i * B:(i + 1) * B].sum().item())
            cells[policy] = cells.get(policy, 0) + n
        return sq.sum() / missing_all.sum(), cells

    def step(self, x0: np.ndarray, passes: list[tuple[np.ndarray, int]],
             rng: np.random.Generator | None = None) -> tuple[float, dict[int, int]]:
        """One optimizer update; returns the per-masked-cell loss."""
        rng = self.rng if rng is None else rng
        self.params.module.train()
        self.optimizer.zero_grad()
        loss, cells = self.batch_loss(x0, passes, rng)
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at epoch {self.epoch}; "
                f"check input scaling and learning rate")
        loss.backward()
        self.optimizer.step()
        self.params.module.eval()
        return value, cells

    def _decay_lr(self) -> None:
        boundaries = {max(1, int(m * self.cfg.epochs))
                      for m in self.cfg.lr_decay_milestones}
        if self.epoch in boundaries:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.cfg.lr_decay_factor

    def run_epoch(self, windows: list[MtsWindow]) -> TrainRecord:
        self.epoch += 1
        self._decay_lr()
        t0 = time.perf_counter()
        order = self.rng.permutation(len(windows))
        W, K = windows[0].W, windows[0].K
        total_sq = 0.0
        policy_cells: dict[int, int] = {}
        for lo in range(0, len(order), self.cfg.batch_size):
            idx = order[lo:lo + self.cfg.batch_size]
            x0 = np.stack([windows[i].values for i in idx])
            passes = self.cfg.masking.passes(W, K, self.rng)
            loss, cells = self.step(x0, passes)
            n_batch = sum(cells.values())
            total_sq += loss * n_batch
            for pol, n in cells.items():
                policy_cells[pol] = policy_cells.get(pol, 0) + n
        total_n = sum(policy_cells.values())
        return TrainRecord(epoch=self.epoch,
                           loss=total_sq / max(total_n, 1),
                           seconds=time.perf_counter() - t0,
                           policy_cells=policy_cells)


def training_step(params: DenoiserParams, window: MtsWindow, pair: MaskPair,
                  sched: NoiseSchedule, rng: np.random.Generator,
                  optimizer: torch.optim.Optimizer | None = None,
                  reference_mode: str = "unconditional") -> float:
    """Single-window update over both mask policies; returns the loss.

    Passing the same ``optimizer`` across calls keeps its moment state; a
    throwaway one is created otherwise.
    """
    cfg = TrainConfig(epochs=1, batch_size=1, reference_mode=reference_mode)
    trainer = Trainer(params, sched, cfg)
    if optimizer is not None:
        trainer.optimizer = optimizer
    passes = [(pair.m0, pair.policy_ids[0]), (pair.m1, pair.policy_ids[1])]
    loss, _ = trainer.step(window.values[None], passes, rng=rng)
    return loss


def train(params: DenoiserParams, windows: list[MtsWindow], cfg: TrainConfig,
          sched: NoiseSchedule, out_dir: str | Path | None = None,
          norm_stats: NormStats | None = None, meta: dict | None = None,
          start_epoch: int = 0,
          log_every: int = 0) -> tuple[DenoiserParams, list[TrainRecord]]:
    """Full training loop with best-loss and final checkpointing.

    Checkpoints and ``train_log.csv`` are written only when ``out_dir`` is
    given (which requires ``norm_stats``). ``start_epoch`` continues epoch
    numbering when resuming.
    """
    if not windows:
        raise ValueError("cannot train on an empty window list")
    trainer = Trainer(params, sched, cfg)
    trainer.epoch = start_epoch
    records: list[TrainRecord] = []
    best = np.inf

    log_path = None
    if out_dir is not None:
        if norm_stats is None:
            raise ValueError("norm_stats required to write checkpoints")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        if start_epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "loss", "seconds"])

    def _ckpt(extra: dict) -> Checkpoint:
        info = {"seed": cfg.seed, "masking": cfg.masking.to_dict(),
                "reference_mode": cfg.reference_mode}
        info.update(meta or {})
        info.update(extra)
        return Checkpoint(params=params, schedule=sched,
                          norm_stats=norm_stats, meta=info)

    for _ in range(cfg.epochs - start_epoch):
        rec = trainer.run_epoch(windows)
        records.append(rec)
        params.trained = True
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [rec.epoch, f"{rec.loss:.6f}", f"{rec.seconds:.3f}"])
        if log_every and rec.epoch % log_every == 0:
            print(f"epoch {rec.epoch}: loss={rec.loss:.4f} ({rec.seconds:.1f}s)")
        if out_dir is not None and rec.loss < best:
            best = rec.loss
            save_checkpoint(out_dir / "checkpoint_best.pt",
                            _ckpt({"epoch": rec.epoch, "loss": rec.loss}))
    if out_dir is not None and records:
        save_checkpoint(out_dir / "checkpoint_final.pt",
                        _ckpt({"epoch": records[-1].epoch,
                               "loss": records[-1].loss}))
    return params, records
