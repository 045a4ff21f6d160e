"""advforensics - adversarial training and evaluation for face forgery detection."""

from importlib.metadata import PackageNotFoundError, version as _pkg_version

try:
    __version__ = _pkg_version("advforensics")
except PackageNotFoundError:
    # Editable or source install with no installed metadata; not worth failing.
    __version__ = "unknown"

from advforensics.autodiff import (
    GradientReversal,
    RampState,
    focal_loss,
    forgery_adversarial_loss,
    gradient_reversal,
    identity_hard_label_loss,
    identity_similarity_loss,
    ramp_lambda,
    total_loss,
)
from advforensics.core import (
    AdversarialConfig,
    BinaryLabel,
    ForgeryMode,
    GeneratorKind,
    IdentityMode,
    SampleRecord,
    Split,
    validate_config,
)
from advforensics.data import (
    FactorDatasetSpec,
    PreprocessSpec,
    generate_factor_dataset,
    holdout_method_split,
    load_manifest,
    preprocess,
)
from advforensics.errors import AdvForensicsError
from advforensics.evaluation import (
    clustering_accuracy_probe,
    export_features,
    roc_auc,
    video_level_scores,
)
from advforensics.identity import (
    EmbeddingCache,
    build_similarity_supervision,
    calibrate_tau,
    cosine_similarity,
    derive_pseudo_identity_labels,
)
from advforensics.networks import AdversarialDetector, build_model, pairwise_feature_distance
from advforensics.training import Trainer, learning_rate, sample_balanced_batch, sweep_tau

__all__ = [
    "AdvForensicsError",
    "AdversarialConfig",
    "AdversarialDetector",
    "BinaryLabel",
    "EmbeddingCache",
    "FactorDatasetSpec",
    "ForgeryMode",
    "GeneratorKind",
    "GradientReversal",
    "IdentityMode",
    "PreprocessSpec",
    "RampState",
    "SampleRecord",
    "Split",
    "Trainer",
    "build_model",
    "build_similarity_supervision",
    "calibrate_tau",
    "clustering_accuracy_probe",
    "cosine_similarity",
    "derive_pseudo_identity_labels",
    "export_features",
    "focal_loss",
    "forgery_adversarial_loss",
    "generate_factor_dataset",
    "gradient_reversal",
    "holdout_method_split",
    "identity_hard_label_loss",
    "identity_similarity_loss",
    "learning_rate",
    "load_manifest",
    "pairwise_feature_distance",
    "preprocess",
    "ramp_lambda",
    "roc_auc",
    "sample_balanced_batch",
    "sweep_tau",
    "total_loss",
    "validate_config",
    "video_level_scores",
]
