"""Feature generator, classification head and the two discriminators."""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from .autodiff import GradientReversal
from .core import AdversarialConfig, GeneratorKind, IdentityMode, derive_seed, pair_count
from .errors import ConfigError, ContractViolation, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "advforensics-ckpt/1"
XCEPTION_INPUT = 299
DISC_HIDDEN = (512, 512)


@dataclass(frozen=True)
class GeneratorSpec:
    kind: GeneratorKind = GeneratorKind.TOY_CNN
    output_dim: int = 64
    pretrained: bool = False
    input_size: int = 32
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.output_dim <= 0:
            raise ConfigError("generator output_dim must be positive")
        if self.kind is GeneratorKind.XCEPTION_2048:
            if self.output_dim != 2048:
                raise ConfigError("XCEPTION_2048 generator requires output_dim=2048")
            if self.input_size != XCEPTION_INPUT:
                raise ConfigError(f"XCEPTION_2048 generator requires {XCEPTION_INPUT}x{XCEPTION_INPUT} input")
        if self.pretrained and not self.weights_path:
            raise ConfigError("pretrained generator needs a weights_path; nothing is downloaded")

    @classmethod
    def from_config(cls, cfg: AdversarialConfig) -> "GeneratorSpec":
        return cls(
            kind=cfg.generator,
            output_dim=cfg.embedding_dim,
            pretrained=cfg.pretrained_path is not None,
            input_size=cfg.image_size,
            weights_path=cfg.pretrained_path,
        )


class HeadKind(str, Enum):
    BINARY_CLS = "binary_cls"
    FORGERY_DISC = "forgery_disc"
    ID_DISC_HARD = "id_disc_hard"
    ID_DISC_SIM = "id_disc_sim"


@dataclass(frozen=True)
class HeadSpec:
    head: HeadKind
    output_dim: int
    hidden_dims: Tuple[int, ...] = ()

    def __post_init__(self):
        expected_hidden = () if self.head is HeadKind.BINARY_CLS else DISC_HIDDEN
        if tuple(self.hidden_dims) != expected_hidden:
            raise ConfigError(f"{self.head.value} head needs hidden_dims={list(expected_hidden)}")
        if self.head is HeadKind.BINARY_CLS and self.output_dim != 2:
            raise ConfigError("binary classifier has exactly two outputs")
        if self.head is HeadKind.ID_DISC_SIM and self.output_dim != 1:
            raise ConfigError("similarity identity head has a single output")
        if self.output_dim <= 0:
            raise ConfigError(f"{self.head.value} head output_dim must be positive")

    @classmethod
    def binary(cls) -> "HeadSpec":
        return cls(HeadKind.BINARY_CLS, 2)

    @classmethod
    def forgery(cls, n_methods: int) -> "HeadSpec":
        return cls(HeadKind.FORGERY_DISC, n_methods, DISC_HIDDEN)

    @classmethod
    def identity_hard(cls, n_identities: int) -> "HeadSpec":
        return cls(HeadKind.ID_DISC_HARD, n_identities, DISC_HIDDEN)

    @classmethod
    def identity_sim(cls) -> "HeadSpec":
        return cls(HeadKind.ID_DISC_SIM, 1, DISC_HIDDEN)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

class ToyCNN(nn.Module):
    """Three conv blocks and global average pooling, for CPU-scale runs."""

    def __init__(self, output_dim: int = 64, in_channels: int = 3):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )

        self.features = nn.Sequential(block(in_channels, 32), block(32, 64), block(64, 128))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(128, output_dim)
        self.num_features = output_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.features(x)).flatten(1)
        return self.proj(x)


class XceptionGenerator(nn.Module):
    """timm Xception with the classifier removed, emitting 2048-d pooled features."""

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        try:
            import timm
        except ImportError as exc:
            raise ConfigError("generator=xception_2048 needs the 'timm' package (pip install advforensics[xception])") from exc
        name = "legacy_xception" if "legacy_xception" in timm.list_models("legacy_xception") else "xception"
        self.backbone = timm.create_model(name, pretrained=False, num_classes=0, global_pool="avg")
        if weights_path:
            if not Path(weights_path).exists():
                raise ConfigError(f"pretrained weights not found: {weights_path}")
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            missing, unexpected = self.backbone.load_state_dict(state, strict=False)
            logger.info("Loaded Xception weights from %s (%d missing, %d unexpected keys)",
                        weights_path, len(missing), len(unexpected))
        self.num_features = self.backbone.num_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)


def build_generator(spec: GeneratorSpec) -> nn.Module:
    if spec.kind is GeneratorKind.XCEPTION_2048:
        return XceptionGenerator(spec.weights_path)
    gen = ToyCNN(spec.output_dim)
    if spec.weights_path:
        gen.load_state_dict(torch.load(spec.weights_path, map_location="cpu", weights_only=True))
    return gen


def forward_generator(images: torch.Tensor, generator: nn.Module, spec: GeneratorSpec) -> torch.Tensor:
    """Z = G(X) for a channels-first batch ``[M, 3, H, W]``."""
    expected = (3, spec.input_size, spec.input_size)
    if images.dim() != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError("generator input", f"[M, {expected[0]}, {expected[1]}, {expected[2]}]",
                         list(images.shape))
    z = generator(images)
    if z.shape[1] != spec.output_dim:
        raise ShapeError("generator output", spec.output_dim, z.shape[1])
    return z


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

class Head(nn.Module):
    """MLP head; the similarity variant squashes its scalar output with a sigmoid."""

    def __init__(self, spec: HeadSpec, in_dim: int):
        super().__init__()
        self.spec = spec
        layers: List[nn.Module] = []
        width = in_dim
        for hidden in spec.hidden_dims:
            layers += [nn.Linear(width, hidden), nn.ReLU(inplace=True)]
            width = hidden
        layers.append(nn.Linear(width, spec.output_dim))
        self.net = nn.Sequential(*layers)
        out = self.net[-1].out_features
        if out != spec.output_dim:
            raise ShapeError(f"{spec.head.value} head", spec.output_dim, out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.net(x)
        if self.spec.head is HeadKind.ID_DISC_SIM:
            return torch.sigmoid(out.squeeze(-1))
        return out


def pairwise_feature_distance(z: torch.Tensor) -> torch.Tensor:
    """Elementwise squared differences for every pair (m, n), m < n, in row-major order."""
    if z.dim() != 2:
        raise ShapeError("feature matrix", "[M, D]", list(z.shape))
    m = z.shape[0]
    if m < 2:
        raise ContractViolation(f"pairwise distances need at least 2 rows, got {m}")
    rows, cols = torch.triu_indices(m, m, offset=1, device=z.device)
    return (z[rows] - z[cols]).pow(2)


def forward_identity_sim_head(head: Head, pair_inputs: torch.Tensor) -> torch.Tensor:
    if head.spec.head is not HeadKind.ID_DISC_SIM:
        raise ContractViolation(f"expected a similarity head, got {head.spec.head.value}")
    return head(pair_inputs)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class AdversarialDetector(nn.Module):
    """Generator with classifier, and GRL-guarded forgery and identity discriminators.

    Both discriminators are always constructed so that a disabled head stays
    visibly frozen at its initial weights.
    """

    def __init__(self, cfg: AdversarialConfig):
        super().__init__()
        self.generator_spec = GeneratorSpec.from_config(cfg)
        self.generator = build_generator(self.generator_spec)
        dim = self.generator_spec.output_dim
        self.classifier = Head(HeadSpec.binary(), dim)
        self.forgery_grl = GradientReversal()
        self.forgery_disc = Head(HeadSpec.forgery(cfg.n_methods), dim)
        self.identity_grl = GradientReversal()
        if cfg.identity_mode in (IdentityMode.HARD_LABEL, IdentityMode.PSEUDO_LABEL):
            self.identity_disc = Head(HeadSpec.identity_hard(cfg.n_identities), dim)
        else:
            self.identity_disc = Head(HeadSpec.identity_sim(), dim)

    def set_lambda(self, lam: float) -> None:
        self.forgery_grl.lam = float(lam)
        self.identity_grl.lam = float(lam)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return forward_generator(images, self.generator, self.generator_spec)

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.classifier(z)

    def discriminate_forgery(self, z_fake: torch.Tensor) -> torch.Tensor:
        return self.forgery_disc(self.forgery_grl(z_fake))

    def discriminate_identity(self, z: torch.Tensor) -> torch.Tensor:
        z = self.identity_grl(z)
        if self.identity_disc.spec.head is HeadKind.ID_DISC_SIM:
            return forward_identity_sim_head(self.identity_disc, pairwise_feature_distance(z))
        return self.identity_disc(z)

    @torch.no_grad()
    def fake_probability(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.classify(self.encode(images)), dim=1)[:, 1]

    def head_groups(self) -> Dict[str, nn.Module]:
        return {
            "generator": self.generator,
            "classifier": self.classifier,
            "forgery_disc": self.forgery_disc,
            "identity_disc": self.identity_disc,
        }


def build_model(cfg: AdversarialConfig) -> AdversarialDetector:
    """Construct the detector with weights initialised from the run seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        model = AdversarialDetector(cfg)
    return model.to(cfg.device)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: AdversarialDetector,
                    optimizer: Optional[torch.optim.Optimizer], extra: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not an {CHECKPOINT_FORMAT} checkpoint")
    return payload


def link_checkpoint(target: Path, alias: Path) -> None:
    """Point ``alias`` (latest/best) at ``target``; copies where symlinks fail."""
    if alias.is_symlink() or alias.exists():
        alias.unlink()
    try:
        alias.symlink_to(target.name)
    except OSError:
        shutil.copyfile(target, alias)
