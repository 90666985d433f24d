"""Ensemble anomaly inference.

The reverse imputation chain is run once per window and mask policy.
Partially denoised imputations are snapshotted at a configurable set of
steps; per-timestamp squared errors against the (normalized) input yield
one candidate labeling per step through a dynamically rescaled quantile
threshold, and a vote across steps produces the final labels.

Steps are counted in the order the reverse process executes them, so step
1 is the first (noisiest) denoising iteration and step T produces the
final imputation. The continuous anomaly score of a timestamp is its
step-T error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataError, MtsWindow, NormStats, RawSeries, windowize
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule, record_forward_trajectory, reverse_step
from .masking import MaskPair, MaskingConfig, merge_imputations

__all__ = [
    "EnsembleConfig",
    "StepErrorStack",
    "DetectionResult",
    "UntrainedModelError",
    "reverse_impute",
    "step_errors",
    "step_thresholds",
    "step_labels",
    "vote",
    "detect",
    "detect_variant",
    "VARIANTS",
]

VARIANTS = ("imputation", "forecasting", "reconstruction", "conditional",
            "non_ensemble", "random_mask", "no_spatial", "no_temporal")


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    """Voting parameters: which denoising steps vote and how many votes
    (strictly more than ``xi``) flag a timestamp."""

    tau_quantile: float = 0.02
    xi: int = 8
    vote_steps: tuple[int, ...] = (23, 26, 29, 32, 35, 38, 41, 44, 47, 50)

    def __post_init__(self):
        steps = tuple(sorted(int(s) for s in set(self.vote_steps)))
        if not steps or any(s < 1 for s in steps):
            raise ValueError("vote_steps must be positive step indices")
        if not 0.0 < self.tau_quantile < 1.0:
            raise ValueError("tau_quantile must lie in (0, 1)")
        if not 0 <= self.xi < len(steps):
            raise ValueError(
                f"xi={self.xi} must be in [0, {len(steps) - 1}] for "
                f"{len(steps)} vote steps")
        object.__setattr__(self, "vote_steps", steps)

    @property
    def n_vote_steps(self) -> int:
        return len(self.vote_steps)

    @property
    def final_step(self) -> int:
        return self.vote_steps[-1]

    def validate_for(self, T: int) -> None:
        if self.final_step != T:
            raise ValueError(
                f"vote_steps must include the final denoising step {T}")

    @classmethod
    def for_schedule(cls, T: int, tau_quantile: float = 0.02,
                     xi: int | None = None, n_steps: int = 10,
                     spacing: int = 3) -> "EnsembleConfig":
        """Default voting set: every ``spacing``-th step among the last
        ``n_steps * spacing`` denoising iterations, ending at step T."""
        steps = tuple(t for t in range(T, T - n_steps * spacing, -spacing)
                      if t >= 1)
        if xi is None:
            xi = min(8, len(steps) - 1)
        return cls(tau_quantile=tau_quantile, xi=xi, vote_steps=steps)

    def to_dict(self) -> dict:
        return {"tau_quantile": self.tau_quantile, "xi": self.xi,
                "vote_steps": list(self.vote_steps)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        return cls(tau_quantile=d["tau_quantile"], xi=d["xi"],
                   vote_steps=tuple(d["vote_steps"]))


@dataclass
class StepErrorStack:
    """Per-step squared imputation errors over an evaluation span.

    ``errors[s]`` is (L_eval, K); ``timestamp_errors[s]`` its mean over
    features. ``timestamps`` maps rows back to positions in the source
    series (identity for full coverage).
    """

    errors: dict[int, np.ndarray]
    timestamp_errors: dict[int, np.ndarray] = field(default_factory=dict)
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        if not self.errors:
            raise ValueError("empty error stack")
        for s, e in self.errors.items():
            if np.any(e < 0):
                raise ValueError(f"negative errors at step {s}")
            if s not in self.timestamp_errors:
                self.timestamp_errors[s] = e.mean(axis=1)

    @property
    def steps(self) -> tuple[int, ...]:
        return tuple(sorted(self.errors))

    @property
    def final_step(self) -> int:
        return max(self.errors)

    @property
    def length(self) -> int:
        return next(iter(self.errors.values())).shape[0]


@dataclass(frozen=True)
class DetectionResult:
    """Votes, final labels and continuous scores per timestamp."""

    votes: np.ndarray
    labels: np.ndarray
    score: np.ndarray
    step_labels: dict[int, np.ndarray]
    xi: int

    def __post_init__(self):
        if np.any(self.labels != (self.votes > self.xi)):
            raise ValueError("labels must equal (votes > xi)")


def _rng_for(seed: int, window_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(window_index), int(stream)]))


def _reverse_impute_batch(params: DenoiserParams, x0: np.ndarray,
                          mask: np.ndarray, policy: int,
                          sched: NoiseSchedule, cfg: EnsembleConfig,
                          rngs: list[np.random.Generator],
                          reference_mode: str = "unconditional",
                          allow_untrained: bool = False) -> dict[int, np.ndarray]:
    """Reverse chain over a batch of windows sharing one mask.

    Returns a map denoising-step -> (B, W, K) snapshot of the chain state
    taken right after that step. Observed cells are pinned to the recorded
    forward chain so they walk back to their exact original values.
    """
    if not params.trained and not allow_untrained:
        raise UntrainedModelError(
            "refusing to run inference with untrained parameters "
            "(pass allow_untrained=True to override)")
    B, W, K = x0.shape
    T = sched.T
    cfg.validate_for(T)
    mask_f = mask.astype(np.float64)
    missing = 1.0 - mask_f

    # Per-window draws come from that window's own generator, in a fixed
    # order: forward trajectory, initial state, then per-step z noise.
    states = np.empty((B, T + 1, W, K))
    init = np.empty((B, W, K))
    zs = np.empty((B, T - 1, W, K)) if T > 1 else None
    for i, rng in enumerate(rngs):
        if reference_mode == "unconditional":
            traj = record_forward_trajectory(x0[i], sched, rng)
            states[i, 0] = traj.x0
            states[i, 1:] = traj.states
        else:
            states[i] = x0[i]
        init[i] = rng.standard_normal((W, K))
        if T > 1:
            # z draws in the order the reverse loop consumes them (t = T..2)
            zs[i] = rng.standard_normal((T - 1, W, K))

    state = mask_f * states[:, T] + missing * init
    snapshots: dict[int, np.ndarray] = {}
    vote_set = set(cfg.vote_steps)
    for t in range(T, 0, -1):
        masked_channel = state * missing
        if reference_mode == "unconditional":
            ref = states[:, t] * mask_f
        else:
            ref = x0 * mask_f
        eps_hat = params.predict_batch(
            masked_channel.astype(np.float32), ref.astype(np.float32),
            np.full(B, t), np.full(B, policy))
        z = zs[:, T - t] if t > 1 else 0.0
        stepped = reverse_step(state, eps_hat.astype(np.float64), t, sched, z)
        held = states[:, t - 1] if reference_mode == "unconditional" else x0
        state = mask_f * held + missing * stepped
        if not np.all(np.isfinite(state)):
            raise RuntimeError(f"non-finite chain state at step t={t}")
        s = T - t + 1
        if s in vote_set:
            snapshots[s] = state.copy()
    return snapshots


def reverse_impute(params: DenoiserParams, window: MtsWindow,
                   mask: np.ndarray, policy: int, sched: NoiseSchedule,
                   cfg: EnsembleConfig, rng: np.random.Generator,
                   reference_mode: str = "unconditional",
                   allow_untrained: bool = False) -> dict[int, np.ndarray]:
    """Reverse imputation of one window; map step -> (W, K) snapshot."""
    out = _reverse_impute_batch(params, window.values[None], np.asarray(mask),
                                policy, sched, cfg, [rng], reference_mode,
                                allow_untrained)
    return {s: v[0] for s, v in out.items()}


def step_errors(imputations: dict[int, dict[int, np.ndarray]],
                truth: MtsWindow, pair: MaskPair) -> StepErrorStack:
    """Merge complementary imputations and square against the truth.

    ``imputations`` maps pass slot (0 for ``pair.m0``, 1 for ``pair.m1``)
    to per-step snapshots. Slot 1 may be omitted only when ``pair.m1``
    masks nothing.
    """
    if 0 not in imputations:
        raise ValueError("missing imputation pass for mask m0")
    need_second = bool(np.any(pair.m1 == 0))
    if need_second and 1 not in imputations:
        raise ValueError("missing imputation pass for mask m1")
    steps = sorted(imputations[0])
    errors = {}
    for s in steps:
        pred0 = imputations[0][s]
        pred1 = imputations[1][s] if need_second else np.zeros_like(pred0)
        merged = merge_imputations(pred0, pred1, pair)
        errors[s] = (merged - truth.values) ** 2
    return StepErrorStack(errors=errors)


def step_thresholds(stack: StepErrorStack,
                    cfg: EnsembleConfig) -> dict[int, float]:
    """Dynamic per-step thresholds.

    The base threshold is the upper ``tau_quantile`` tail boundary of the
    final step's per-timestamp errors; step s rescales it by the ratio of
    total final-step error to total step-s error, so noisier (earlier)
    steps keep only their most extreme timestamps.
    """
    final = stack.final_step
    tau_final = float(np.quantile(stack.timestamp_errors[final],
                                  1.0 - cfg.tau_quantile))
    sum_final = float(stack.errors[final].sum())
    out = {}
    for s in stack.steps:
        sum_s = float(stack.errors[s].sum())
        out[s] = tau_final * sum_final / sum_s if sum_s > 0 else np.inf
    return out


def step_labels(stack: StepErrorStack,
                cfg: EnsembleConfig) -> dict[int, np.ndarray]:
    """Per-step binary labels: error at or above the step's threshold."""
    if stack.length == 0:
        raise ValueError("empty evaluation span")
    if stack.final_step != cfg.final_step:
        raise ValueError(
            f"stack ends at step {stack.final_step}, config expects "
            f"{cfg.final_step}")
    thresholds = step_thresholds(stack, cfg)
    return {s: (stack.timestamp_errors[s] >= thresholds[s]).astype(np.int8)
            for s in stack.steps}


def vote(labels: dict[int, np.ndarray], cfg: EnsembleConfig,
         score: np.ndarray | None = None) -> DetectionResult:
    """Sum per-step labels into votes; final anomaly iff votes exceed xi."""
    missing = [s for s in cfg.vote_steps if s not in labels]
    if missing:
        raise ValueError(f"missing step labels for steps {missing}")
    votes = np.sum([labels[s] for s in cfg.vote_steps], axis=0).astype(np.int64)
    final = (votes > cfg.xi).astype(np.int8)
    if score is None:
        score = np.zeros(votes.shape[0])
    return DetectionResult(votes=votes, labels=final, score=np.asarray(score),
                           step_labels={s: labels[s] for s in cfg.vote_steps},
                           xi=cfg.xi)


def detect(params: DenoiserParams, test: RawSeries, stats: NormStats,
           sched: NoiseSchedule, ecfg: EnsembleConfig,
           masking: MaskingConfig, seed: int = 0,
           reference_mode: str = "unconditional", window: int = 100,
           chunk_size: int = 32,
           allow_untrained: bool = False) -> DetectionResult:
    """Run ensemble inference across a full series.

    Windows are processed in chunks; per-timestamp errors are assembled
    through the coverage map, thresholds are computed globally over the
    covered span, and the result is expanded back to series length.
    Timestamps never imputed (the warm-up head under forecasting masks)
    get zero votes and score.
    """
    if test.K != params.config.n_features:
        raise DataError(
            f"series has K={test.K} features, checkpoint expects "
            f"{params.config.n_features}")
    ecfg.validate_for(sched.T)
    stride = window // 2 if masking.strategy == "forecasting" else None
    wset = windowize(test, stats, window, stride=stride)
    L, K = test.L, test.K

    per_step = {s: np.full((L, K), np.nan) for s in ecfg.vote_steps}
    if masking.strategy == "forecasting":
        # Score each timestamp from the last window whose predicted half
        # contains it; the first half-window of the series has no
        # predictor and stays uncovered.
        pred_cov = np.full(L, -1, dtype=np.int64)
        for i, w in enumerate(wset.windows):
            pred_cov[w.start_index + window // 2:w.start_index + window] = i
        source_rows = [np.flatnonzero(pred_cov == i) for i in range(len(wset))]
    else:
        source_rows = [np.flatnonzero(wset.coverage == i)
                       for i in range(len(wset))]

    for lo in range(0, len(wset), chunk_size):
        idx = [i for i in range(lo, min(lo + chunk_size, len(wset)))
               if source_rows[i].size]
        if not idx:
            continue
        x0 = np.stack([wset.windows[i].values for i in idx])
        pairs = [masking.pair(window, K, _rng_for(seed, i, 2)) for i in idx]
        # Grating and ablation masks are shared across windows; random
        # pairs differ per window, so group identical masks per slot.
        slot_count = 2 if masking.strategy in ("grating", "random") else 1
        imputed: list[dict[int, dict[int, np.ndarray]]] = [dict() for _ in idx]
        for slot in range(slot_count):
            if masking.strategy == "random":
                for j, i in enumerate(idx):
                    mask = pairs[j].mask(slot)
                    snaps = _reverse_impute_batch(
                        params, x0[j:j + 1], mask, pairs[j].policy_ids[slot],
                        sched, ecfg, [_rng_for(seed, i, slot)],
                        reference_mode, allow_untrained)
                    imputed[j][slot] = {s: v[0] for s, v in snaps.items()}
            else:
                mask = pairs[0].mask(slot)
                snaps = _reverse_impute_batch(
                    params, x0, mask, pairs[0].policy_ids[slot], sched, ecfg,
                    [_rng_for(seed, i, slot) for i in idx],
                    reference_mode, allow_untrained)
                for j in range(len(idx)):
                    imputed[j][slot] = {s: v[j] for s, v in snaps.items()}
        for j, i in enumerate(idx):
            stack = step_errors(imputed[j], wset.windows[i], pairs[j])
            rows = source_rows[i]
            local = rows - wset.windows[i].start_index
            for s in ecfg.vote_steps:
                per_step[s][rows] = stack.errors[s][local]

    covered = ~np.isnan(per_step[ecfg.final_step][:, 0])
    span = np.flatnonzero(covered)
    if span.size == 0:
        raise DataError("no timestamp received an imputation")
    stack = StepErrorStack(
        errors={s: per_step[s][span] for s in ecfg.vote_steps},
        timestamps=span)
    labels = step_labels(stack, ecfg)
    span_result = vote(labels, ecfg,
                       score=stack.timestamp_errors[ecfg.final_step])

    votes = np.zeros(L, dtype=np.int64)
    final = np.zeros(L, dtype=np.int8)
    score = np.zeros(L)
    votes[span] = span_result.votes
    final[span] = span_result.labels
    score[span] = span_result.score
    full_step_labels = {}
    for s in ecfg.vote_steps:
        vec = np.zeros(L, dtype=np.int8)
        vec[span] = span_result.step_labels[s]
        full_step_labels[s] = vec
    return DetectionResult(votes=votes, labels=final, score=score,
                           step_labels=full_step_labels, xi=ecfg.xi)


def _variant_settings(mode: str, base_masking: MaskingConfig,
                      ecfg: EnsembleConfig, T: int):
    """Masking, reference mode and voting used by each ablation variant."""
    masking = base_masking
    reference = "unconditional"
    if mode == "forecasting":
        masking = MaskingConfig(strategy="forecasting")
    elif mode == "reconstruction":
        masking = MaskingConfig(strategy="reconstruction")
    elif mode == "random_mask":
        masking = MaskingConfig(strategy="random",
                                miss_prob=base_masking.miss_prob)
    elif mode == "conditional":
        reference = "conditional"
    elif mode == "non_ensemble":
        ecfg = EnsembleConfig(tau_quantile=ecfg.tau_quantile, xi=0,
                              vote_steps=(T,))
    elif mode not in ("imputation", "no_spatial", "no_temporal"):
        raise ValueError(f"unknown variant mode {mode!r}")
    return masking, reference, ecfg


def required_train_mode(mode: str) -> str:
    """Which training mode produces a checkpoint this variant can consume."""
    return "imputation" if mode == "non_ensemble" else mode


def detect_variant(mode: str, params: DenoiserParams, test: RawSeries,
                   stats: NormStats, sched: NoiseSchedule,
                   ecfg: EnsembleConfig, masking: MaskingConfig,
                   seed: int = 0, window: int = 100,
                   checkpoint_mode: str | None = None,
                   **kwargs) -> DetectionResult:
    """Dispatch one ablation variant onto :func:`detect`.

    ``checkpoint_mode`` (when known) is validated against the variant:
    e.g. conditional inference requires a conditionally trained model and
    ``no_spatial`` a model built without the feature-axis transformer.
    """
    if mode not in VARIANTS:
        raise ValueError(f"unknown variant mode {mode!r}")
    if checkpoint_mode is not None and checkpoint_mode != required_train_mode(mode):
        raise ValueError(
            f"variant {mode!r} needs a {required_train_mode(mode)!r} "
            f"checkpoint, got {checkpoint_mode!r}")
    if mode == "no_spatial" and params.config.use_spatial:
        raise ValueError("no_spatial variant needs use_spatial=False params")
    if mode == "no_temporal" and params.config.use_temporal:
        raise ValueError("no_temporal variant needs use_temporal=False params")
    masking, reference, ecfg = _variant_settings(mode, masking, ecfg, sched.T)
    return detect(params, test, stats, sched, ecfg, masking, seed=seed,
                  reference_mode=reference, window=window, **kwargs)
