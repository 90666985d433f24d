"""Imputation-based anomaly detection for multivariate time series.

A denoising diffusion model is trained to impute deliberately masked
stretches of a series; at inference, imputation errors captured across
the reverse process vote on per-timestamp anomaly labels.
"""

from .data import (MtsWindow, NormStats, RawSeries, WindowSet, denormalize,
                   fit_normalizer, load_dataset_dir, load_raw, normalize,
                   windowize)
from .denoiser import (Checkpoint, DenoiserConfig, DenoiserInput,
                       DenoiserParams, build_denoiser, load_checkpoint,
                       predict_noise, save_checkpoint)
from .detection import (DetectionResult, EnsembleConfig, StepErrorStack,
                        detect, detect_variant, reverse_impute, step_errors,
                        step_labels, step_thresholds, vote)
from .diffusion import (ForwardTrajectory, NoiseSchedule, build_schedule,
                        forward_corrupt, implied_noise,
                        record_forward_trajectory, reverse_step)
from .experiment import ExperimentConfig, load_config, save_config
from .masking import (MaskPair, MaskedWindow, MaskingConfig, ablation_mask,
                      grating_masks, merge_imputations, random_mask,
                      random_mask_pair)
from .metrics import (EventList, MetricsReport, add_metric,
                      evaluate_detection, events_from_labels, prf1, range_auc)
from .synthetic import synthetic_series, write_synthetic_dataset
from .training import TrainConfig, TrainRecord, Trainer, train, training_step

__version__ = "0.1.0"
