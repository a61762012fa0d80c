"""sonoclass: two-scale ensemble classification for imbalanced image sets.

Building blocks: a minimal reverse-mode autodiff core, image decoding and
augmentation kernels, Dawid-Skene annotator consensus, five imbalance-aware
losses, a two-branch convolutional ensemble, confusion-matrix reporting, and
a deterministic Adam training pipeline with a CLI front end.
"""

from .augment import (
    AugmentationConfig,
    AugmentationPipeline,
    augment_sample,
    sample_rng,
)
from .autodiff import Tape, Tensor, grad_check
from .consensus import AnnotationSet, DawidSkene, agreement_rate, ds_run
from .datasets import (
    DatasetManifest,
    SynthSpec,
    class_counts,
    read_manifest,
    stratified_split,
    synth_generate,
    synth_profile,
    write_manifest,
)
from .ensemble import (
    BackboneSpec,
    EnsembleConfig,
    build_ensemble,
    ensemble_forward,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .estimator import EnsembleClassifier
from .image import RasterImage, bilinear_resize, decode_image, encode_image, ycbcr_to_rgb
from .losses import (
    LossConfig,
    cross_entropy,
    cross_entropy_label_smoothing,
    focal_loss,
    ldam_focal_loss,
    ldam_loss,
    make_loss,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    confusion_accumulate,
    overall_metrics,
    report_emit,
)
from .training import AdamParams, AdamState, adam_step, evaluate, fit_arrays, train

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "AugmentationPipeline",
    "augment_sample",
    "sample_rng",
    "Tape",
    "Tensor",
    "grad_check",
    "AnnotationSet",
    "DawidSkene",
    "agreement_rate",
    "ds_run",
    "DatasetManifest",
    "SynthSpec",
    "class_counts",
    "read_manifest",
    "stratified_split",
    "synth_generate",
    "synth_profile",
    "write_manifest",
    "BackboneSpec",
    "EnsembleConfig",
    "build_ensemble",
    "ensemble_forward",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "EnsembleClassifier",
    "RasterImage",
    "bilinear_resize",
    "decode_image",
    "encode_image",
    "ycbcr_to_rgb",
    "LossConfig",
    "cross_entropy",
    "cross_entropy_label_smoothing",
    "focal_loss",
    "ldam_focal_loss",
    "ldam_loss",
    "make_loss",
    "ConfusionMatrix",
    "MetricsReport",
    "confusion_accumulate",
    "overall_metrics",
    "report_emit",
    "AdamParams",
    "AdamState",
    "adam_step",
    "evaluate",
    "fit_arrays",
    "train",
    "__version__",
]
