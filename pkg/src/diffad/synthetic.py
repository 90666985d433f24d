"""Synthetic coupled-sinusoid benchmark with injected anomalies.

The clean signal is three correlated sinusoids plus observation noise.
Test-split anomalies cycle through three families: short spikes, level
shifts, and correlation breaks (one feature decouples from the others).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from .data import RawSeries

__all__ = [
    "clean_signal",
    "inject_anomalies",
    "synthetic_series",
    "write_synthetic_dataset",
]

EVENT_TYPES = ("spike", "level_shift", "correlation_break")


def clean_signal(L: int, rng: np.random.Generator,
                 noise: float = 0.05, phase: float = 0.0) -> np.ndarray:
    """Three coupled sinusoids with Gaussian observation noise.

    Periods 47 and 19 are coprime with typical window strides, so
    consecutive windows sample many different phases.
    """
    t = np.arange(L)
    w0 = 2 * np.pi / 47
    w1 = 2 * np.pi / 19
    base0 = np.sin(w0 * t + phase)
    base1 = 0.6 * np.sin(w0 * t + phase + 1.1) + 0.4 * np.sin(w1 * t + phase)
    base2 = 0.5 * base0 - 0.5 * base1 + 0.3 * np.sin(w1 * t + phase + 0.7)
    x = np.stack([base0, base1, base2], axis=1)
    return x + noise * rng.standard_normal(x.shape)


def inject_anomalies(values: np.ndarray, rng: np.random.Generator,
                     n_events: int = 12, margin: int = 120,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Overwrite ``n_events`` disjoint segments with anomalous behavior.

    Event starts are spread over the series with jitter; types cycle so
    every family appears. Returns the modified values and binary labels.
    """
    values = values.copy()
    L, K = values.shape
    labels = np.zeros(L, dtype=np.int8)
    usable = L - 2 * margin
    slot = usable // n_events
    for i in range(n_events):
        kind = EVENT_TYPES[i % len(EVENT_TYPES)]
        length = int(rng.integers(6, 13)) if kind == "spike" \
            else int(rng.integers(15, 31))
        start = margin + i * slot + int(rng.integers(0, max(slot - length, 1)))
        end = start + length
        feats = rng.choice(K, size=int(rng.integers(max(K - 1, 1), K + 1)),
                           replace=False)
        sign = rng.choice((-1.0, 1.0))
        if kind == "spike":
            values[start:end, feats] += sign * rng.uniform(2.8, 3.8)
        elif kind == "level_shift":
            values[start:end, feats] += sign * rng.uniform(1.8, 2.6)
        else:
            # break the inter-feature relationship: one feature flips and
            # shifts while the others stay on the normal manifold
            f = feats[0]
            values[start:end, f] = -values[start:end, f] + sign * 1.5
        labels[start:end] = 1
    return values, labels


def synthetic_series(seed: int = 0, train_length: int = 4000,
                     test_length: int = 2000, n_events: int = 12,
                     noise: float = 0.05) -> tuple[RawSeries, RawSeries]:
    """Build the train/test pair used by the end-to-end benchmark."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    train = clean_signal(train_length, rng, noise=noise)
    test_clean = clean_signal(test_length, rng, noise=noise,
                              phase=rng.uniform(0, 2 * np.pi))
    test_values, labels = inject_anomalies(test_clean, rng, n_events=n_events)
    return (RawSeries(values=train, labels=None, name="synthetic-train"),
            RawSeries(values=test_values, labels=labels, name="synthetic-test"))


def write_synthetic_dataset(root: str | Path, seed: int = 0, **kwargs) -> Path:
    """Materialize the benchmark in the standard dataset directory layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    train, test = synthetic_series(seed=seed, **kwargs)
    cols = [f"f{k}" for k in range(train.K)]
    pd.DataFrame(train.values, columns=cols).to_csv(
        root / "train.csv", index=False)
    pd.DataFrame(test.values, columns=cols).to_csv(
        root / "test.csv", index=False)
    pd.DataFrame({"label": test.labels}).to_csv(
        root / "test_label.csv", index=False)
    return root
