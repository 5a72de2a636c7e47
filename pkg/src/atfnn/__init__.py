"""Attentive time-frequency network for speech emotion recognition.

A numpy/scipy implementation of log-mel feature extraction, a small
reverse-mode autodiff core, the attentive time-frequency model with its
ablation variants, and a leave-one-speaker-out evaluation harness.
"""

from . import autodiff
from .features import (
    FRAME_HOP,
    FRAME_LEN,
    LOG_FLOOR,
    N_FFT,
    N_MELS,
    SAMPLE_RATE,
    SEG_FRAMES,
    TRAIN_SEG_HOP,
    extract_segments,
    frame_signal,
    hz_to_mel,
    load_wav,
    log_mel_spectrogram,
    mel_filterbank,
    mel_to_hz,
    power_spectrum,
    segment,
)
from .model import (
    VARIANTS,
    AtfnnModel,
    AttentionMaps,
    ModelConfig,
    load_model,
    posteriors,
    save_model,
    train_step,
)
from .evaluate import (
    FeatureStore,
    Fold,
    FoldError,
    FoldPlan,
    FoldResult,
    TrainSettings,
    aggregate_utterance,
    build_report,
    load_feature_cache,
    make_folds,
    metrics,
    read_manifest,
    row_normalize,
    run_crossval,
    run_fold,
    score_fold,
)
from .synthetic import generate_dataset

__version__ = "1.0.0"

__all__ = [
    "AtfnnModel",
    "AttentionMaps",
    "FeatureStore",
    "Fold",
    "FoldError",
    "FoldPlan",
    "FoldResult",
    "FRAME_HOP",
    "FRAME_LEN",
    "LOG_FLOOR",
    "ModelConfig",
    "N_FFT",
    "N_MELS",
    "SAMPLE_RATE",
    "SEG_FRAMES",
    "TRAIN_SEG_HOP",
    "TrainSettings",
    "VARIANTS",
    "aggregate_utterance",
    "autodiff",
    "build_report",
    "extract_segments",
    "frame_signal",
    "generate_dataset",
    "hz_to_mel",
    "load_feature_cache",
    "load_model",
    "load_wav",
    "log_mel_spectrogram",
    "make_folds",
    "mel_filterbank",
    "mel_to_hz",
    "metrics",
    "posteriors",
    "power_spectrum",
    "read_manifest",
    "row_normalize",
    "run_crossval",
    "run_fold",
    "save_model",
    "score_fold",
    "segment",
    "train_step",
]
