"""Lung-sound classification: DSP front end, wavelet scalograms, and a
numpy CNN-Transformer classifier with challenge-style scoring.

The curated surface below re-exports the names most callers need; the
submodules (`lungsound.autodiff`, `lungsound.dsp`, ...) stay importable
directly for everything else.
"""

from .errors import DataError, LungsoundError, NumericError, UsageError
from .rng import Rng
from .ingest import (
    AudioRecording, DatasetManifest, EventAnnotation, EventLabel,
    ManifestEntry, RecordLabel, build_manifest, load_manifest, load_wav,
    parse_annotations, parse_label, save_manifest, stratified_split,
    write_annotations, write_wav,
)
from .dsp import (
    FilterCoefficients, SegmentPolicy, apply_filter,
    design_butterworth_bandpass, extract_event_segment,
    extract_record_segment, normalize_amplitude, preprocess, resample,
)
from .scalogram import (
    MorseParams, ScalogramImage, ScalogramMatrix, cwt, load_scalogram,
    power_scalogram, render_image, save_scalogram, scale_to_freq,
    select_scales,
)
from .autodiff import Tensor, backward, finite_difference_check
from .model import (
    Model, ModelConfig, build_model, classify, export_embeddings,
    model_forward, model_logits, parameter_count,
)
from .objective import (
    FocalParams, class_weights_from_counts, compute_class_weights,
    default_gamma, focal_loss, focal_loss_from_logits,
)
from .evaluation import (
    ConfusionMatrix, ScoreReport, TaskId, challenge_scores, check_scores,
    confusion, gamma_sweep, map_labels, parse_report, report,
    task_class_names,
)
from .trainer import (
    Checkpoint, TrainConfig, TrainHistory, checkpoint_load, checkpoint_save,
    evaluate, featurize, index_truths, load_batch, predict, train, train_task,
)
from .synth import SyntheticSpec, preset_spec, synthesize_corpus, synthesize_recording

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors and seeding
    "LungsoundError", "DataError", "NumericError", "UsageError", "Rng",
    # dataset ingestion
    "EventLabel", "RecordLabel", "EventAnnotation", "AudioRecording",
    "ManifestEntry", "DatasetManifest", "load_wav", "write_wav",
    "parse_label", "parse_annotations", "write_annotations",
    "build_manifest", "save_manifest", "load_manifest", "stratified_split",
    # preprocessing
    "FilterCoefficients", "SegmentPolicy", "design_butterworth_bandpass",
    "apply_filter", "resample", "normalize_amplitude", "preprocess",
    "extract_record_segment", "extract_event_segment",
    # scalograms
    "MorseParams", "ScalogramMatrix", "ScalogramImage", "select_scales",
    "cwt", "power_scalogram", "render_image", "scale_to_freq",
    "save_scalogram", "load_scalogram",
    # differentiation
    "Tensor", "backward", "finite_difference_check",
    # network
    "ModelConfig", "Model", "build_model", "model_logits", "model_forward",
    "classify", "parameter_count", "export_embeddings",
    # loss
    "FocalParams", "default_gamma", "class_weights_from_counts",
    "compute_class_weights", "focal_loss", "focal_loss_from_logits",
    # training
    "TrainConfig", "TrainHistory", "Checkpoint", "featurize", "load_batch",
    "index_truths", "train", "train_task", "predict", "evaluate",
    "checkpoint_save", "checkpoint_load",
    # scoring
    "TaskId", "ConfusionMatrix", "ScoreReport", "map_labels",
    "task_class_names", "confusion", "challenge_scores", "check_scores",
    "gamma_sweep", "report", "parse_report",
    # synthetic data
    "SyntheticSpec", "preset_spec", "synthesize_recording",
    "synthesize_corpus",
]
