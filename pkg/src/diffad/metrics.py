"""Evaluation metrics for range anomalies.

Provides timestamp-level precision/recall/F1 (raw and event-adjusted), a
range-aware AUC over buffered continuous labels (ROC and PR variants),
and the average detection delay across ground-truth events.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EventList",
    "MetricsReport",
    "events_from_labels",
    "prf1",
    "adjust_predictions",
    "buffered_labels",
    "range_auc",
    "add_metric",
    "default_buffer",
    "evaluate_detection",
]


@dataclass(frozen=True)
class EventList:
    """Disjoint sorted (start, end-exclusive) anomaly segments."""

    events: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev_end = -1
        for s, e in self.events:
            if not (prev_end < s < e):
                raise ValueError(f"events must be sorted, disjoint and nonempty: {self.events}")
            prev_end = e

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    precision_raw: float
    recall_raw: float
    f1_raw: float
    r_auc_pr: float
    r_auc_roc: float
    add: float
    n_events: int


def events_from_labels(truth: np.ndarray) -> EventList:
    """Maximal runs of 1s in a binary vector, as (start, end) segments."""
    truth = np.asarray(truth).astype(bool)
    edges = np.diff(np.r_[0, truth.view(np.int8), 0])
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return EventList(events=tuple(zip(starts.tolist(), ends.tolist())))


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def adjust_predictions(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Credit whole ground-truth events hit by at least one prediction."""
    pred = np.asarray(pred).astype(np.int8).copy()
    for s, e in events_from_labels(truth):
        if pred[s:e].any():
            pred[s:e] = 1
    return pred


def prf1(pred: np.ndarray, truth: np.ndarray,
         adjust: bool = False) -> tuple[float, float, float]:
    """Timestamp precision/recall/F1, optionally event-adjusted.

    With ``adjust=True`` any predicted positive inside a ground-truth event
    marks the full event as detected before counting.
    """
    pred = np.asarray(pred).astype(np.int8)
    truth = np.asarray(truth).astype(np.int8)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if adjust:
        pred = adjust_predictions(pred, truth)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    p = _safe_div(tp, int(pred.sum()))
    r = _safe_div(tp, int(truth.sum()))
    f1 = _safe_div(2 * p * r, p + r)
    return p, r, f1


def buffered_labels(truth: np.ndarray, buffer: int) -> np.ndarray:
    """Continuous label curve: 1 inside events, linear ramps of length
    ``buffer`` on each side, merged with neighboring events by maximum."""
    truth = np.asarray(truth).astype(np.float64)
    if buffer < 0:
        raise ValueError("buffer must be >= 0")
    cont = truth.copy()
    if buffer == 0:
        return cont
    n = len(cont)
    ramp = 1.0 - np.arange(1, buffer + 1) / (buffer + 1)
    for s, e in events_from_labels(truth):
        left = np.arange(max(s - buffer, 0), s)
        cont[left] = np.maximum(cont[left], ramp[s - left - 1])
        right = np.arange(e, min(e + buffer, n))
        cont[right] = np.maximum(cont[right], ramp[right - e])
    return cont


def range_auc(score: np.ndarray, truth: np.ndarray, buffer: int = 0,
              curve: str = "roc") -> float:
    """Threshold-free area over buffered continuous labels.

    Sweeps every unique score value as a ``>=`` threshold, computes
    TPR/FPR (``curve="roc"``) or precision/recall (``curve="pr"``) against
    the continuous labels and returns the trapezoidal area. Inputs without
    any positive label mass return 0; inputs without negative mass have a
    ROC area of 1 by convention.
    """
    score = np.asarray(score, dtype=np.float64)
    truth = np.asarray(truth)
    if score.shape != truth.shape:
        raise ValueError(f"length mismatch: {score.shape} vs {truth.shape}")
    if curve not in ("roc", "pr"):
        raise ValueError(f"unknown curve {curve!r}")
    cont = buffered_labels(truth, buffer)
    pos = cont.sum()
    neg = (1.0 - cont).sum()
    if pos == 0.0:
        return 0.0

    thresholds = np.unique(score)[::-1]
    tpr = np.empty(len(thresholds))
    fpr = np.empty(len(thresholds))
    prec = np.empty(len(thresholds))
    for i, th in enumerate(thresholds):
        pred = score >= th
        tp = cont[pred].sum()
        fp = pred.sum() - tp
        tpr[i] = tp / pos
        fpr[i] = _safe_div(fp, neg)
        prec[i] = _safe_div(tp, tp + fp)

    if curve == "roc":
        if neg == 0.0:
            return 1.0
        x = np.r_[0.0, fpr]
        y = np.r_[0.0, tpr]
    else:
        x = np.r_[0.0, tpr]
        y = np.r_[prec[0], prec]
    return float(np.trapezoid(y, x))


def add_metric(pred: np.ndarray, events: EventList) -> float:
    """Mean delay from event start to its first in-event detection.

    Events never detected contribute their full length.
    """
    if len(events) == 0:
        raise ValueError("detection delay is undefined without events")
    pred = np.asarray(pred).astype(bool)
    delays = []
    for s, e in events:
        hits = np.flatnonzero(pred[s:e])
        delays.append(float(hits[0]) if hits.size else float(e - s))
    return float(np.mean(delays))


def default_buffer(events: EventList, cap: int = 50) -> int:
    """Half the mean event length, capped."""
    if len(events) == 0:
        return 0
    mean_len = np.mean([e - s for s, e in events])
    return int(min(mean_len / 2, cap))


def evaluate_detection(pred: np.ndarray, score: np.ndarray, truth: np.ndarray,
                       buffer: int | None = None) -> MetricsReport:
    """Compute the full report for one series."""
    events = events_from_labels(truth)
    if buffer is None:
        buffer = default_buffer(events)
    p_raw, r_raw, f1_raw = prf1(pred, truth, adjust=False)
    p_adj, r_adj, f1_adj = prf1(pred, truth, adjust=True)
    return MetricsReport(
        precision=p_adj, recall=r_adj, f1=f1_adj,
        precision_raw=p_raw, recall_raw=r_raw, f1_raw=f1_raw,
        r_auc_pr=range_auc(score, truth, buffer, curve="pr"),
        r_auc_roc=range_auc(score, truth, buffer, curve="roc"),
        add=add_metric(pred, events) if len(events) else float("nan"),
        n_events=len(events),
    )
