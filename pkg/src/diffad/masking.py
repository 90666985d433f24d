"""Mask construction and merging of complementary imputations.

Masks are observed-indicators: 1 marks a cell the model may rely on, 0 a
cell it must impute. A :class:`MaskPair` holds the two complementary
policies of the staggered (grating) strategy; each cell is masked under
exactly one policy, so merging the two imputation passes covers the whole
window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "POLICY_SENTINEL",
    "MaskPair",
    "MaskedWindow",
    "MaskingConfig",
    "grating_masks",
    "random_mask",
    "random_mask_pair",
    "ablation_mask",
    "merge_imputations",
]

# Policy id fed to the model for masks that carry no parity information
# (random and ablation modes).
POLICY_SENTINEL = 2


@dataclass(frozen=True)
class MaskPair:
    """Two complementary observed-indicator masks over a W x K window."""

    m0: np.ndarray
    m1: np.ndarray
    policy_ids: tuple[int, int] = (0, 1)

    def __post_init__(self):
        m0 = np.asarray(self.m0)
        m1 = np.asarray(self.m1)
        if m0.shape != m1.shape:
            raise ValueError("mask shapes differ")
        if not np.array_equal(m0 + m1, np.ones_like(m0)):
            raise ValueError("masks are not complementary (m0 + m1 != 1)")
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "m1", m1)

    def mask(self, policy_slot: int) -> np.ndarray:
        return (self.m0, self.m1)[policy_slot]


@dataclass(frozen=True)
class MaskedWindow:
    """A window together with the mask and policy id applied to it."""

    values: np.ndarray
    mask: np.ndarray
    policy: int

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("mask dims must equal window dims")

    @property
    def observed(self) -> np.ndarray:
        return self.values * self.mask


def grating_masks(W: int, K: int, n_masked: int = 5, n_unmasked: int = 5) -> MaskPair:
    """Staggered equal-interval masks along the time axis.

    The window is cut into ``n_masked + n_unmasked`` equal time segments.
    Policy 0 masks the even-indexed segments, policy 1 the odd-indexed
    ones; masks are uniform across features.
    """
    if n_masked != n_unmasked:
        raise ValueError(
            f"staggered pattern needs n_masked == n_unmasked, got {n_masked}/{n_unmasked}")
    n_seg = n_masked + n_unmasked
    if n_seg < 2 or W % n_seg != 0:
        raise ValueError(
            f"window length W={W} is not divisible into {n_seg} equal segments")
    seg = W // n_seg
    segment_index = np.repeat(np.arange(n_seg), seg)        # (W,)
    m0_row = (segment_index % 2 == 1).astype(np.int8)       # even segments masked
    m0 = np.broadcast_to(m0_row[:, None], (W, K)).copy()
    m1 = 1 - m0
    return MaskPair(m0=m0, m1=m1)


def random_mask(W: int, K: int, miss_prob: float,
                rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli observed-indicator with at least one cell on each side.

    All-masked and all-observed draws are resampled so that neither the
    loss nor the reference input can become degenerate.
    """
    if not 0.0 < miss_prob < 1.0:
        raise ValueError(f"miss_prob must be in (0, 1), got {miss_prob}")
    while True:
        m = (rng.random((W, K)) >= miss_prob).astype(np.int8)
        s = int(m.sum())
        if 0 < s < W * K:
            return m


def random_mask_pair(W: int, K: int, miss_prob: float,
                     rng: np.random.Generator) -> MaskPair:
    """A random mask and its complement, so coverage matches the grating pair."""
    m = random_mask(W, K, miss_prob, rng)
    return MaskPair(m0=m, m1=1 - m, policy_ids=(POLICY_SENTINEL, POLICY_SENTINEL))


def ablation_mask(W: int, K: int, mode: str) -> np.ndarray:
    """Masks of the two degenerate self-supervision baselines.

    ``forecasting`` observes the first half of the window and hides the
    second; ``reconstruction`` hides everything.
    """
    if mode == "forecasting":
        if W % 2 != 0:
            raise ValueError(f"forecasting mask needs even W, got {W}")
        m = np.zeros((W, K), dtype=np.int8)
        m[: W // 2] = 1
        return m
    if mode == "reconstruction":
        return np.zeros((W, K), dtype=np.int8)
    raise ValueError(f"unknown ablation mask mode {mode!r}")


def merge_imputations(pred0: np.ndarray, pred1: np.ndarray,
                      pair: MaskPair) -> np.ndarray:
    """Stitch two complementary passes into one full-coverage prediction.

    Each output cell comes from the pass under which it was masked, so
    observed-cell content never leaks into downstream error computation.
    """
    pred0 = np.asarray(pred0)
    pred1 = np.asarray(pred1)
    if pred0.shape != pair.m0.shape or pred1.shape != pair.m1.shape:
        raise ValueError("prediction/mask shape mismatch")
    return np.where(pair.m0 == 0, pred0, pred1)


STRATEGIES = ("grating", "random", "forecasting", "reconstruction")


@dataclass(frozen=True)
class MaskingConfig:
    """Which masking strategy to apply and its parameters.

    Serialized into checkpoints so inference reuses exactly the masking
    the model was trained with.
    """

    strategy: str = "grating"
    n_masked: int = 5
    n_unmasked: int = 5
    miss_prob: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}")

    def pair(self, W: int, K: int,
             rng: np.random.Generator | None = None) -> MaskPair:
        """The complementary mask pair for one window.

        Single-mask strategies return a degenerate pair whose second mask
        hides nothing, so merging takes every cell from the first pass.
        """
        if self.strategy == "grating":
            return grating_masks(W, K, self.n_masked, self.n_unmasked)
        if self.strategy == "random":
            if rng is None:
                raise ValueError("random masking needs a random source")
            return random_mask_pair(W, K, self.miss_prob, rng)
        m = ablation_mask(W, K, self.strategy)
        return MaskPair(m0=m, m1=1 - m,
                        policy_ids=(POLICY_SENTINEL, POLICY_SENTINEL))

    def passes(self, W: int, K: int,
               rng: np.random.Generator | None = None) -> list[tuple[np.ndarray, int]]:
        """(observed-mask, policy id) model passes for one window.

        Complementary strategies run two passes; forecasting and
        reconstruction run a single directional pass.
        """
        pair = self.pair(W, K, rng)
        out = [(pair.m0, pair.policy_ids[0])]
        if self.strategy in ("grating", "random"):
            out.append((pair.m1, pair.policy_ids[1]))
        return out

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "n_masked": self.n_masked,
                "n_unmasked": self.n_unmasked, "miss_prob": self.miss_prob}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskingConfig":
        return cls(**d)
