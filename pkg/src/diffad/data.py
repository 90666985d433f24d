"""Loading, normalization and windowing of labeled multivariate series.

File conventions:

* CSV: header ``f0,...,f{K-1}`` plus an optional trailing ``label`` column,
  one row per timestamp, UTF-8, ``.`` decimal separator.
* Binary: a dense row-major float matrix in ``<name>.bin`` with a sidecar
  ``<name>.meta`` containing ``rows=``, ``cols=`` and ``dtype=`` lines.
* Dataset directory: ``<name>/train.csv``, ``<name>/test.csv`` and
  ``<name>/test_label.csv`` (a single 0/1 column).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = [
    "RawSeries",
    "NormStats",
    "MtsWindow",
    "WindowSet",
    "load_raw",
    "load_dataset_dir",
    "fit_normalizer",
    "normalize",
    "denormalize",
    "windowize",
]

SCALE_FLOOR = 1e-8


class DataError(ValueError):
    """Raised for malformed input files or invalid windowing requests."""


@dataclass(frozen=True)
class RawSeries:
    """An L x K series with optional binary labels, finite after ingestion."""

    values: np.ndarray
    labels: np.ndarray | None
    name: str
    filled_cells: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"series {self.name!r} must be a non-empty L x K matrix")
        if not np.all(np.isfinite(v)):
            raise DataError(f"series {self.name!r} contains non-finite values")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (v.shape[0],):
                raise DataError(
                    f"labels of {self.name!r} must have length L={v.shape[0]}")
            if not np.isin(lab, (0, 1)).all():
                raise DataError(f"label column of {self.name!r} is non-binary")
            object.__setattr__(self, "labels", lab.astype(np.int8))
        object.__setattr__(self, "values", v)

    @property
    def L(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Per-feature center/scale fitted on the training split only."""

    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).ravel()
        s = np.asarray(self.scale, dtype=np.float64).ravel()
        if c.shape != s.shape:
            raise DataError("center and scale must have equal length")
        if np.any(s <= 0.0):
            raise DataError("scale entries must be strictly positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "scale", s)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(center=np.asarray(d["center"]), scale=np.asarray(d["scale"]))


@dataclass(frozen=True)
class MtsWindow:
    """A fixed-length normalized slice of a series; the unit of inference."""

    values: np.ndarray
    start_index: int
    labels: np.ndarray | None = None

    @property
    def W(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSet:
    """Windows plus the per-timestamp map to their designated score source."""

    windows: list[MtsWindow]
    coverage: np.ndarray  # (L,) index into `windows`
    window_length: int
    series_length: int

    def __len__(self) -> int:
        return len(self.windows)


def _fill_non_finite(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Forward-fill each feature, then zero any leading gaps."""
    bad = ~np.isfinite(values)
    n_bad = int(bad.sum())
    if n_bad:
        frame = pd.DataFrame(np.where(bad, np.nan, values))
        values = frame.ffill().fillna(0.0).to_numpy(dtype=np.float64)
    return values, n_bad


def _read_sidecar(meta_path: Path) -> dict:
    meta = {}
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    return meta


def load_raw(path: str | Path, format: str = "csv") -> RawSeries:
    """Read one series from disk, repairing non-finite cells.

    Non-finite cells are forward-filled within their feature and any
    remaining gap at the start is zero-filled; the number of repaired
    cells is recorded on the result.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "csv":
        frame = pd.read_csv(path)
        if len(frame) == 0:
            raise DataError(f"{path} has zero rows")
        labels = None
        if "label" in frame.columns:
            lab = frame.pop("label").to_numpy()
            if not np.isin(lab, (0, 1)).all():
                raise DataError(f"label column of {path} is non-binary")
            labels = lab.astype(np.int8)
        values = frame.to_numpy(dtype=np.float64)
    elif format == "binary":
        meta = _read_sidecar(path.with_suffix(".meta"))
        rows, cols = int(meta["rows"]), int(meta["cols"])
        dtype = np.dtype(meta.get("dtype", "float64"))
        flat = np.fromfile(path, dtype=dtype)
        if flat.size != rows * cols:
            raise DataError(
                f"{path}: expected {rows * cols} values, found {flat.size}")
        if rows == 0:
            raise DataError(f"{path} has zero rows")
        values = flat.reshape(rows, cols).astype(np.float64)
        labels = None
    else:
        raise DataError(f"unknown format {format!r}")

    values, n_bad = _fill_non_finite(values)
    return RawSeries(values=values, labels=labels, name=path.stem,
                     filled_cells=n_bad)


def load_dataset_dir(root: str | Path) -> tuple[RawSeries, RawSeries]:
    """Load the ``train.csv`` / ``test.csv`` / ``test_label.csv`` layout."""
    root = Path(root)
    problems = [f"missing {name}" for name in
                ("train.csv", "test.csv", "test_label.csv")
                if not (root / name).exists()]
    if problems:
        raise DataError(f"dataset {root}: " + "; ".join(problems))
    train = load_raw(root / "train.csv")
    test = load_raw(root / "test.csv")
    lab_frame = pd.read_csv(root / "test_label.csv")
    labels = lab_frame.iloc[:, 0].to_numpy()
    if labels.shape[0] != test.L:
        raise DataError(
            f"dataset {root}: test has {test.L} rows but {labels.shape[0]} labels")
    test = RawSeries(values=test.values, labels=labels, name=root.name,
                     filled_cells=test.filled_cells)
    return train, test


def fit_normalizer(train: RawSeries) -> NormStats:
    """Per-feature z-score statistics with a floor on the scale."""
    if train.L < 2:
        raise DataError("need at least 2 rows to fit a normalizer")
    center = train.values.mean(axis=0)
    scale = np.maximum(train.values.std(axis=0), SCALE_FLOOR)
    return NormStats(center=center, scale=scale)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.center) / stats.scale


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.scale + stats.center


def windowize(series: RawSeries, stats: NormStats, window: int,
              stride: int | None = None) -> WindowSet:
    """Slice a series into normalized detection windows with full coverage.

    Windows advance by ``stride`` (defaults to ``window``, i.e.
    non-overlapping) from index 0. If the tail is not covered, one extra
    window aligned to the series end is added. Every timestamp's score
    source is the last window covering it.
    """
    if window > series.L:
        raise DataError(f"window {window} exceeds series length {series.L}")
    if window < 1:
        raise DataError("window must be positive")
    stride = window if stride is None else stride
    if not 1 <= stride <= window:
        raise DataError(f"stride must be in [1, window], got {stride}")

    starts = list(range(0, series.L - window + 1, stride))
    if starts[-1] + window < series.L:
        starts.append(series.L - window)

    values = normalize(series.values, stats)
    windows = []
    coverage = np.empty(series.L, dtype=np.int64)
    for i, s in enumerate(starts):
        lab = series.labels[s:s + window] if series.labels is not None else None
        windows.append(MtsWindow(values=values[s:s + window],
                                 start_index=s, labels=lab))
        coverage[s:s + window] = i
    return WindowSet(windows=windows, coverage=coverage,
                     window_length=window, series_length=series.L)
