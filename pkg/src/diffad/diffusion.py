"""Noise schedules and the forward/reverse Gaussian transition math.

Everything here is plain numpy and shared by training and inference. The
schedule is indexed with ``t`` in ``[1, T]``; index 0 means "clean data".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "ForwardTrajectory",
    "build_schedule",
    "forward_corrupt",
    "record_forward_trajectory",
    "reverse_step",
    "implied_noise",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha-bar tables for a fixed number of corruption steps.

    ``beta``, ``alpha_bar`` and ``tilde_beta`` are length-``T`` arrays whose
    entry ``i`` corresponds to step ``t = i + 1``. ``tilde_beta`` holds the
    posterior variances of the reverse transitions.
    """

    T: int
    beta: np.ndarray
    shape: str = "quadratic"
    alpha_bar: np.ndarray = field(init=False)
    tilde_beta: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ValueError(f"beta must have shape ({self.T},), got {beta.shape}")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta entries must lie strictly inside (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        tilde = np.empty_like(beta)
        tilde[0] = beta[0]
        if self.T > 1:
            tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "tilde_beta", tilde)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step index t={t} outside [1, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def tilde_beta_at(self, t: int) -> float:
        return float(self.tilde_beta[self._check_t(t) - 1])

    def to_dict(self) -> dict:
        """Serializable form stored inside checkpoints."""
        return {"T": self.T, "beta": self.beta.tolist(), "shape": self.shape}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(T=int(d["T"]), beta=np.asarray(d["beta"], dtype=np.float64),
                   shape=str(d.get("shape", "quadratic")))


@dataclass(frozen=True)
class ForwardTrajectory:
    """A recorded step-by-step corruption chain of one window.

    ``states[i]`` is the chain state at step ``t = i + 1`` and ``noises[i]``
    the standard-normal increment drawn for that step; the clean input is
    kept separately in ``x0``. ``total_noise(t)`` returns the closed-form
    equivalent noise, i.e. the array ``e`` with
    ``states[t-1] = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * e``.
    """

    x0: np.ndarray
    states: np.ndarray  # (T, W, K)
    noises: np.ndarray  # (T, W, K)
    schedule: NoiseSchedule

    def state(self, t: int) -> np.ndarray:
        """Chain state at step t; t=0 returns the clean input."""
        if t == 0:
            return self.x0
        return self.states[self.schedule._check_t(t) - 1]

    def noise(self, t: int) -> np.ndarray:
        return self.noises[self.schedule._check_t(t) - 1]

    def total_noise(self, t: int) -> np.ndarray:
        a = self.schedule.alpha_bar_at(t)
        return (self.state(t) - np.sqrt(a) * self.x0) / np.sqrt(1.0 - a)


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.5,
                   shape: str = "quadratic") -> NoiseSchedule:
    """Build a predefined noise-level table.

    ``quadratic`` interpolates linearly in sqrt(beta) space, ``linear`` in
    beta space. ``beta_min == beta_max`` is accepted as a constant schedule.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if shape == "quadratic":
        beta = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), T) ** 2
    elif shape == "linear":
        beta = np.linspace(beta_min, beta_max, T)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    return NoiseSchedule(T=T, beta=beta, shape=shape)


def forward_corrupt(x0: np.ndarray, t: int, eps: np.ndarray,
                    sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    a = sched.alpha_bar_at(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def record_forward_trajectory(x0: np.ndarray, sched: NoiseSchedule,
                              rng: np.random.Generator,
                              dtype=np.float64) -> ForwardTrajectory:
    """Iterate the corruption chain on x0, keeping every increment and state.

    The recorded increments are what inference replays so that observed
    cells can be walked back to their exact original values.
    """
    x0 = np.asarray(x0, dtype=dtype)
    states = np.empty((sched.T,) + x0.shape, dtype=dtype)
    noises = np.empty_like(states)
    state = x0
    for t in range(1, sched.T + 1):
        b = sched.beta_at(t)
        eps = rng.standard_normal(x0.shape).astype(dtype, copy=False)
        state = np.sqrt(1.0 - b) * state + np.sqrt(b) * eps
        states[t - 1] = state
        noises[t - 1] = eps
    return ForwardTrajectory(x0=x0, states=states, noises=noises, schedule=sched)


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                 sched: NoiseSchedule, z: np.ndarray | float = 0.0) -> np.ndarray:
    """One reverse Gaussian transition with fixed posterior variance.

    ``z`` must be standard normal for t > 1 and zero for t = 1.
    """
    b = sched.beta_at(t)
    a_bar = sched.alpha_bar_at(t)
    mu = (x_t - (b / np.sqrt(1.0 - a_bar)) * eps_hat) / np.sqrt(1.0 - b)
    return mu + np.sqrt(sched.tilde_beta_at(t)) * z


def implied_noise(x_t: np.ndarray, x0: np.ndarray, t: int,
                  sched: NoiseSchedule) -> np.ndarray:
    """Total noise consistent with a state x_t and a known clean signal x0.

    This is what a perfect denoiser would output, and what the inversion
    oracle feeds into ``reverse_step``: driving the reverse chain with it
    reproduces x0 exactly at t = 1.
    """
    a = sched.alpha_bar_at(t)
    return (x_t - np.sqrt(a) * x0) / np.sqrt(1.0 - a)
