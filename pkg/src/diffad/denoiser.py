"""The noise-prediction network used by training and inference.

Stacked residual blocks, each running self-attention along the time axis
(per feature) and along the feature axis (per timestep), gated pointwise
transforms, and skip aggregation. Conditioning enters through a
diffusion-step embedding, a mask-policy embedding, and per-token side
information (sinusoidal time encoding plus a learned feature embedding).

The public surface works on numpy arrays; torch is an internal engine.
Output projections start at zero so an untrained network predicts zero
noise everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NormStats
from .diffusion import NoiseSchedule

__all__ = [
    "DenoiserConfig",
    "DenoiserInput",
    "DenoiserParams",
    "Checkpoint",
    "build_denoiser",
    "predict_noise",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "diffad-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteOutputError(RuntimeError):
    """Raised when the network produces NaN/Inf activations."""


@dataclass(frozen=True)
class DenoiserConfig:
    n_features: int
    n_blocks: int = 4
    hidden_dim: int = 128
    n_heads: int = 8
    step_embed_dim: int = 128
    feature_embed_dim: int = 16
    time_embed_dim: int = 128
    ff_dim: int = 64
    T: int = 50
    n_policies: int = 3
    use_temporal: bool = True
    use_spatial: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim={self.hidden_dim} not divisible by n_heads={self.n_heads}")
        if self.n_features < 1 or self.T < 1:
            raise ValueError("n_features and T must be positive")
        if self.step_embed_dim % 2 or self.time_embed_dim % 2:
            raise ValueError("embedding dims must be even")
        if self.feature_embed_dim < 0:
            raise ValueError("feature_embed_dim must be >= 0")

    @property
    def side_dim(self) -> int:
        return self.time_embed_dim + self.feature_embed_dim


@dataclass(frozen=True)
class DenoiserInput:
    """One window's inputs: corrupted values on masked cells, the
    noise-carried reference on observed cells, and conditioning indices."""

    masked_channel: np.ndarray
    reference_channel: np.ndarray
    mask: np.ndarray
    t: int
    policy: int
    time_index: np.ndarray | None = None
    feature_index: np.ndarray | None = None

    def __post_init__(self):
        mc, rc, m = (np.asarray(a) for a in
                     (self.masked_channel, self.reference_channel, self.mask))
        if not (mc.shape == rc.shape == m.shape) or mc.ndim != 2:
            raise ValueError("channel/mask shapes must agree and be W x K")
        if np.any(mc * m != 0):
            raise ValueError("masked_channel must be zero on observed cells")
        if np.any(rc * (1 - m) != 0):
            raise ValueError("reference_channel must be zero on masked cells")
        W, K = mc.shape
        if self.time_index is None:
            object.__setattr__(self, "time_index", np.arange(W))
        if self.feature_index is None:
            object.__setattr__(self, "feature_index", np.arange(K))


def _sinusoid_table(n_positions: int, dim: int, max_scale: float) -> torch.Tensor:
    """Half-sin/half-cos table with geometrically spaced frequencies."""
    half = dim // 2
    pos = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    exponent = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    freq = max_scale ** -exponent
    angles = pos * freq
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1).float()


class _StepEmbedding(nn.Module):
    def __init__(self, T: int, dim: int):
        super().__init__()
        self.register_buffer("table", _sinusoid_table(T + 1, dim, 1e4),
                             persistent=False)
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = self.table[t]
        x = F.silu(self.lin1(x))
        return F.silu(self.lin2(x))


def _attention_layer(cfg: DenoiserConfig) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d_model=cfg.hidden_dim, nhead=cfg.n_heads, dim_feedforward=cfg.ff_dim,
        activation="gelu", dropout=0.0, batch_first=True)


class _ResidualBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.diff_proj = nn.Linear(cfg.step_embed_dim, cfg.hidden_dim)
        self.temporal = _attention_layer(cfg) if cfg.use_temporal else None
        self.spatial = _attention_layer(cfg) if cfg.use_spatial else None
        self.mid_proj = nn.Conv1d(cfg.hidden_dim, 2 * cfg.hidden_dim, 1)
        self.side_proj = nn.Conv1d(cfg.side_dim, 2 * cfg.hidden_dim, 1)
        self.out_proj = nn.Conv1d(cfg.hidden_dim, 2 * cfg.hidden_dim, 1)

    def forward(self, x, emb, side, shape):
        B, C, K, W = shape
        y = x + self.diff_proj(emb).unsqueeze(-1)           # (B, C, K*W)
        if self.temporal is not None:
            y = y.reshape(B, C, K, W).permute(0, 2, 3, 1).reshape(B * K, W, C)
            y = self.temporal(y)
            y = y.reshape(B, K, W, C).permute(0, 3, 1, 2).reshape(B, C, K * W)
        if self.spatial is not None:
            y = y.reshape(B, C, K, W).permute(0, 3, 2, 1).reshape(B * W, K, C)
            y = self.spatial(y)
            y = y.reshape(B, W, K, C).permute(0, 3, 2, 1).reshape(B, C, K * W)
        y = self.mid_proj(y) + self.side_proj(side)
        gate, filt = torch.chunk(y, 2, dim=1)
        y = torch.sigmoid(gate) * torch.tanh(filt)
        residual, skip = torch.chunk(self.out_proj(y), 2, dim=1)
        return (x + residual) / math.sqrt(2.0), skip


class NoisePredictor(nn.Module):
    """Maps (masked channel, reference channel, t, policy) to predicted noise."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Conv1d(2, cfg.hidden_dim, 1)
        self.step_embed = _StepEmbedding(cfg.T, cfg.step_embed_dim)
        self.policy_embed = nn.Embedding(cfg.n_policies, cfg.step_embed_dim)
        if cfg.feature_embed_dim > 0:
            self.feature_embed = nn.Embedding(cfg.n_features, cfg.feature_embed_dim)
        else:
            self.feature_embed = None
        self.blocks = nn.ModuleList(_ResidualBlock(cfg) for _ in range(cfg.n_blocks))
        self.head1 = nn.Conv1d(cfg.hidden_dim, cfg.hidden_dim, 1)
        self.head2 = nn.Conv1d(cfg.hidden_dim, 1, 1)

    def _side_info(self, time_index, feature_index, B):
        cfg = self.cfg
        W, K = time_index.shape[0], feature_index.shape[0]
        dtype = self.head1.weight.dtype
        time_pe = _sinusoid_table(int(time_index.max()) + 1,
                                  cfg.time_embed_dim, 1e4).to(dtype)[time_index]
        parts = [time_pe.unsqueeze(0).expand(K, W, -1)]     # (K, W, TE)
        if self.feature_embed is not None:
            feat = self.feature_embed(feature_index)        # (K, FE)
            parts.append(feat.unsqueeze(1).expand(K, W, -1))
        side = torch.cat(parts, dim=-1)                     # (K, W, side)
        side = side.permute(2, 0, 1).reshape(1, cfg.side_dim, K * W)
        return side.expand(B, -1, -1)

    def forward(self, masked, reference, t, policy, time_index, feature_index):
        """All tensors batched: masked/reference (B, W, K), t/policy (B,)."""
        cfg = self.cfg
        B, W, K = masked.shape
        x = torch.stack([masked, reference], dim=1)         # (B, 2, W, K)
        x = x.permute(0, 1, 3, 2).reshape(B, 2, K * W)
        x = F.silu(self.input_proj(x))                      # (B, C, K*W)

        emb = self.step_embed(t) + self.policy_embed(policy)
        side = self._side_info(time_index, feature_index, B)

        shape = (B, cfg.hidden_dim, K, W)
        skips = None
        for block in self.blocks:
            x, skip = block(x, emb, side, shape)
            skips = skip if skips is None else skips + skip
        y = skips / math.sqrt(cfg.n_blocks)
        y = F.silu(self.head1(y))
        y = self.head2(y).reshape(B, K, W).permute(0, 2, 1)
        return y                                            # (B, W, K)


@dataclass
class DenoiserParams:
    """Learnable parameter set plus its config snapshot."""

    module: NoisePredictor
    config: DenoiserConfig
    version: int = CHECKPOINT_VERSION
    trained: bool = False

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def predict_batch(self, masked: np.ndarray, reference: np.ndarray,
                      t: np.ndarray, policy: np.ndarray,
                      time_index: np.ndarray | None = None,
                      feature_index: np.ndarray | None = None) -> np.ndarray:
        """Inference over a batch of windows; numpy in, numpy out."""
        B, W, K = masked.shape
        if K != self.config.n_features:
            raise ValueError(
                f"input has K={K} features, model expects {self.config.n_features}")
        ti = np.arange(W) if time_index is None else time_index
        fi = np.arange(K) if feature_index is None else feature_index
        dev_dtype = self.dtype
        with torch.no_grad():
            out = self.module(
                torch.from_numpy(np.ascontiguousarray(masked)).to(dev_dtype),
                torch.from_numpy(np.ascontiguousarray(reference)).to(dev_dtype),
                torch.from_numpy(np.ascontiguousarray(t)).long(),
                torch.from_numpy(np.ascontiguousarray(policy)).long(),
                torch.from_numpy(np.ascontiguousarray(ti)).long(),
                torch.from_numpy(np.ascontiguousarray(fi)).long(),
            )
        out = out.numpy()
        if not np.all(np.isfinite(out)):
            raise NonFiniteOutputError(
                f"non-finite network output (t range {t.min()}..{t.max()})")
        return out


def _init_parameters(module: NoisePredictor, gen: torch.Generator) -> None:
    """Deterministic variance-scaled init; zero the output projections."""
    for name, mod in sorted(module.named_modules()):
        if isinstance(mod, (nn.Linear, nn.Conv1d)):
            nn.init.kaiming_normal_(mod.weight, nonlinearity="relu", generator=gen)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.Embedding):
            nn.init.normal_(mod.weight, std=1.0, generator=gen)
        elif isinstance(mod, nn.MultiheadAttention):
            nn.init.xavier_uniform_(mod.in_proj_weight, generator=gen)
            nn.init.zeros_(mod.in_proj_bias)
        elif isinstance(mod, nn.LayerNorm):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
    # Zeroing each block's output projection makes every skip (and hence
    # the network output) exactly zero at initialization while leaving the
    # head weights random, so gradients reach the blocks from step one.
    for block in module.blocks:
        nn.init.zeros_(block.out_proj.weight)
        nn.init.zeros_(block.out_proj.bias)


def build_denoiser(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    """Construct and deterministically initialize the network."""
    module = NoisePredictor(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    _init_parameters(module, gen)
    module.eval()
    return DenoiserParams(module=module, config=cfg)


def predict_noise(params: DenoiserParams, inp: DenoiserInput) -> np.ndarray:
    """Predict the noise grid for a single window."""
    out = params.predict_batch(
        inp.masked_channel[None].astype(np.float64),
        inp.reference_channel[None].astype(np.float64),
        np.array([inp.t]), np.array([inp.policy]),
        inp.time_index, inp.feature_index)
    return out[0].astype(np.float64)


@dataclass
class Checkpoint:
    """Self-describing bundle: parameters, schedule, normalizer, metadata."""

    params: DenoiserParams
    schedule: NoiseSchedule
    norm_stats: NormStats
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.params.config),
        "schedule": ckpt.schedule.to_dict(),
        "norm_stats": ckpt.norm_stats.to_dict(),
        "state_dict": ckpt.params.module.state_dict(),
        "trained": ckpt.params.trained,
        "meta": dict(ckpt.meta),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {payload['version']} is newer than supported")
    cfg = DenoiserConfig(**payload["config"])
    module = NoisePredictor(cfg)
    module.load_state_dict(payload["state_dict"])
    module.eval()
    params = DenoiserParams(module=module, config=cfg,
                            version=payload["version"],
                            trained=bool(payload["trained"]))
    return Checkpoint(params=params,
                      schedule=NoiseSchedule.from_dict(payload["schedule"]),
                      norm_stats=NormStats.from_dict(payload["norm_stats"]),
                      meta=dict(payload.get("meta", {})))
