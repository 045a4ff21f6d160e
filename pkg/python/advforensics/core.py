"""Shared data model, configuration and seeded randomness."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ConfigError, ContractViolation, DataError


class BinaryLabel(str, Enum):
    REAL = "real"
    FAKE = "fake"

    @property
    def as_int(self) -> int:
        return 1 if self is BinaryLabel.FAKE else 0


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class IdentityMode(str, Enum):
    HARD_LABEL = "hard_label"
    SIMILARITY = "similarity"
    PSEUDO_LABEL = "pseudo_label"
    OFF = "off"


class ForgeryMode(str, Enum):
    ON = "on"
    OFF = "off"


class GeneratorKind(str, Enum):
    TOY_CNN = "toy_cnn"
    XCEPTION_2048 = "xception_2048"


def _parse_enum(enum_cls, value, what: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise DataError(f"invalid {what} {value!r} (expected one of: {allowed})") from None


@dataclass(frozen=True)
class SampleRecord:
    """One extracted frame and its labels.

    ``method_label`` and ``identity_label`` are ``None`` when absent. REAL
    records never carry a method label.
    """

    image_path: str
    binary_label: BinaryLabel
    method_label: Optional[int]
    identity_label: Optional[int]
    video_id: str
    split: Split
    face_box: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "binary_label", _parse_enum(BinaryLabel, self.binary_label, "binary_label"))
        object.__setattr__(self, "split", _parse_enum(Split, self.split, "split"))
        if self.binary_label is BinaryLabel.REAL and self.method_label is not None:
            raise DataError(
                f"REAL record {self.image_path!r} carries method_label={self.method_label}"
            )
        for name in ("method_label", "identity_label"):
            value = getattr(self, name)
            if value is not None and (isinstance(value, bool) or not isinstance(value, int) or value < 0):
                raise DataError(f"{name} must be a nonnegative integer or null, got {value!r}")
        if not self.video_id:
            raise DataError(f"record {self.image_path!r} has an empty video_id")
        if self.face_box is not None:
            box = tuple(int(v) for v in self.face_box)
            if len(box) != 4:
                raise DataError(f"face_box must be [x, y, w, h], got {self.face_box!r}")
            object.__setattr__(self, "face_box", box)

    @property
    def sample_id(self) -> str:
        return self.image_path

    @property
    def is_fake(self) -> bool:
        return self.binary_label is BinaryLabel.FAKE

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "image_path": self.image_path,
            "binary_label": self.binary_label.value,
            "method_label": self.method_label,
            "identity_label": self.identity_label,
            "video_id": self.video_id,
            "split": self.split.value,
        }
        if self.face_box is not None:
            out["face_box"] = list(self.face_box)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SampleRecord":
        required = ("image_path", "binary_label", "method_label", "identity_label", "video_id", "split")
        missing = [k for k in required if k not in data]
        if missing:
            raise DataError(f"missing keys: {', '.join(missing)}")
        unknown = set(data) - set(required) - {"face_box"}
        if unknown:
            raise DataError(f"unknown keys: {', '.join(sorted(unknown))}")
        return cls(
            image_path=str(data["image_path"]),
            binary_label=data["binary_label"],
            method_label=data["method_label"],
            identity_label=data["identity_label"],
            video_id=str(data["video_id"]),
            split=data["split"],
            face_box=data.get("face_box"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        return cls.from_dict(json.loads(line))


@dataclass(frozen=True)
class AdversarialConfig:
    """All hyperparameters of one training run."""

    n_methods: int = 4
    n_identities: Optional[int] = None
    identity_mode: IdentityMode = IdentityMode.SIMILARITY
    forgery_mode: ForgeryMode = ForgeryMode.ON
    lambda1: float = 0.8
    lambda2: float = 5.0
    gamma: float = 10.0
    tau: float = 0.07
    alpha: float = 0.25
    beta: float = 2.0
    normalize_pair_loss: bool = False
    generator: GeneratorKind = GeneratorKind.TOY_CNN
    feature_dim: int = 2048
    generator_dim: int = 64
    image_size: int = 32
    pretrained_path: Optional[str] = None
    batch_size: int = 64
    total_iters: int = 20000
    base_lr: float = 1e-4
    val_checks_per_epoch: int = 10
    patience: int = 20
    min_improvement: float = 1e-4
    stop_warmup: float = 0.25
    keep_checkpoints: int = 3
    max_frames_per_video: int = 110
    device: str = "cpu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "identity_mode", _parse_enum(IdentityMode, self.identity_mode, "identity_mode"))
        object.__setattr__(self, "forgery_mode", _parse_enum(ForgeryMode, self.forgery_mode, "forgery_mode"))
        object.__setattr__(self, "generator", _parse_enum(GeneratorKind, self.generator, "generator"))

    @property
    def embedding_dim(self) -> int:
        """Width of Z actually produced by the configured generator."""
        if self.generator is GeneratorKind.XCEPTION_2048:
            return self.feature_dim
        return self.generator_dim

    def replace(self, **changes) -> "AdversarialConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, Enum) else value
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdversarialConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AdversarialConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AdversarialConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def require_valid(self) -> "AdversarialConfig":
        result = validate_config(self)
        if not result.ok:
            raise ConfigError("invalid config: " + "; ".join(result.violations), result.violations)
        return self


@dataclass(frozen=True)
class ValidationResult:
    violations: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_config(cfg: AdversarialConfig) -> ValidationResult:
    """Check every configuration invariant; never raises, never mutates."""
    v: List[str] = []
    if cfg.lambda1 < 0:
        v.append("lambda1 must be nonnegative")
    if cfg.lambda2 < 0:
        v.append("lambda2 must be nonnegative")
    if not cfg.gamma > 0:
        v.append("gamma must be positive")
    if not -1.0 <= cfg.tau <= 1.0:
        v.append("tau must lie in [-1, 1]")
    if not 0.0 < cfg.alpha < 1.0:
        v.append("alpha must lie in (0, 1)")
    if cfg.beta < 0:
        v.append("beta must be nonnegative")
    if cfg.feature_dim <= 0:
        v.append("feature_dim must be positive")
    if cfg.generator_dim <= 0:
        v.append("generator_dim must be positive")
    if cfg.n_methods <= 0:
        v.append("n_methods must be positive")
    if cfg.n_identities is not None and cfg.n_identities <= 0:
        v.append("n_identities must be positive when present")
    if cfg.identity_mode is IdentityMode.HARD_LABEL and cfg.n_identities is None:
        v.append("identity_mode=hard_label requires n_identities")
    if cfg.identity_mode is IdentityMode.PSEUDO_LABEL and cfg.n_identities is None:
        v.append("identity_mode=pseudo_label requires n_identities (cluster count)")
    if cfg.batch_size <= 0:
        v.append("batch_size must be positive")
    elif cfg.batch_size % 2:
        v.append("batch_size must be even")
    if cfg.total_iters <= 0:
        v.append("total_iters must be positive")
    if not cfg.base_lr > 0:
        v.append("base_lr must be positive")
    if cfg.val_checks_per_epoch <= 0:
        v.append("val_checks_per_epoch must be positive")
    if cfg.patience <= 0:
        v.append("patience must be positive")
    if not 0.0 <= cfg.stop_warmup < 1.0:
        v.append("stop_warmup must lie in [0, 1)")
    if cfg.keep_checkpoints < 1:
        v.append("keep_checkpoints must be at least 1")
    if cfg.max_frames_per_video <= 0:
        v.append("max_frames_per_video must be positive")
    if cfg.generator is GeneratorKind.XCEPTION_2048:
        if cfg.feature_dim != 2048:
            v.append("generator=xception_2048 requires feature_dim=2048")
        if cfg.image_size != 299:
            v.append("generator=xception_2048 requires image_size=299")
    elif cfg.image_size < 8:
        v.append("image_size must be at least 8 for toy_cnn")
    return ValidationResult(tuple(v))


@dataclass(frozen=True)
class FeatureBatch:
    """Generator output Z for one batch plus the labels each head needs."""

    features: torch.Tensor
    binary_labels: torch.Tensor
    method_labels: Tuple[Optional[int], ...]
    identity_labels: Tuple[Optional[int], ...]
    sample_ids: Tuple[str, ...]

    def __post_init__(self):
        m = self.features.shape[0]
        lengths = {
            "binary_labels": len(self.binary_labels),
            "method_labels": len(self.method_labels),
            "identity_labels": len(self.identity_labels),
            "sample_ids": len(self.sample_ids),
        }
        bad = {k: n for k, n in lengths.items() if n != m}
        if bad:
            raise ContractViolation(f"per-sample arrays must have length {m}: {bad}")
        if not torch.isfinite(self.features.detach()).all():
            raise ContractViolation("feature batch contains non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def fake_mask(self) -> torch.Tensor:
        return self.binary_labels == 1


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed; adding components never shifts others."""
    digest = hashlib.blake2b(f"{seed}:{component}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(derive_seed(seed, "numpy-global") % (2**32))
    torch.manual_seed(derive_seed(seed, "torch-global"))
    torch.use_deterministic_algorithms(True, warn_only=True)


def pair_count(m: int) -> int:
    return m * (m - 1) // 2


def is_finite(value: float) -> bool:
    return math.isfinite(float(value))
