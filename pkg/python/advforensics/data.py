"""Manifest ingestion, frame preprocessing and the synthetic factor dataset."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

from .core import BinaryLabel, SampleRecord, Split, component_rng
from .identity import EmbeddingCache, SyntheticFactorOracle
from .errors import AdvForensicsError, ContractViolation, DataError, ManifestError, SplitLeakError

logger = logging.getLogger(__name__)

EMBEDDINGS_FILE = "embeddings.bin"
MANIFEST_FILE = "manifest.jsonl"


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestSummary:
    n_records: int
    n_videos: int
    by_split: Dict[str, int]
    by_class: Dict[str, int]
    by_method: Dict[int, int]
    by_identity: Dict[int, int]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_videos": self.n_videos,
            "by_split": self.by_split,
            "by_class": self.by_class,
            "by_method": {str(k): v for k, v in self.by_method.items()},
            "by_identity": {str(k): v for k, v in self.by_identity.items()},
        }

    def format(self) -> str:
        lines = [f"{self.n_records} records in {self.n_videos} videos"]
        lines.append("  splits:  " + ", ".join(f"{k}={v}" for k, v in self.by_split.items()))
        lines.append("  classes: " + ", ".join(f"{k}={v}" for k, v in self.by_class.items()))
        if self.by_method:
            lines.append("  methods: " + ", ".join(f"{k}={v}" for k, v in sorted(self.by_method.items())))
        if self.by_identity:
            lines.append(f"  identities: {len(self.by_identity)}")
        return "\n".join(lines)


def summarize(records: Sequence[SampleRecord]) -> ManifestSummary:
    return ManifestSummary(
        n_records=len(records),
        n_videos=len({r.video_id for r in records}),
        by_split=dict(Counter(r.split.value for r in records)),
        by_class=dict(Counter(r.binary_label.value for r in records)),
        by_method=dict(Counter(r.method_label for r in records if r.method_label is not None)),
        by_identity=dict(Counter(r.identity_label for r in records if r.identity_label is not None)),
    )


@dataclass
class Manifest:
    """Validated records plus the directory their image paths are relative to."""

    records: List[SampleRecord]
    root: Path
    path: Optional[Path] = None
    summary: ManifestSummary = field(init=False)

    def __post_init__(self):
        self.summary = summarize(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, split: Union[Split, str]) -> List[SampleRecord]:
        split = Split(split)
        return [r for r in self.records if r.split is split]

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records: Sequence[SampleRecord]) -> "Manifest":
        return Manifest(list(records), self.root, self.path)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def check_video_consistency(records: Sequence[SampleRecord], lines: Optional[Sequence[int]] = None) -> None:
    seen: Dict[str, Tuple[BinaryLabel, Split, int]] = {}
    for i, r in enumerate(records):
        line = lines[i] if lines is not None else i + 1
        if r.video_id not in seen:
            seen[r.video_id] = (r.binary_label, r.split, line)
            continue
        label, split, first = seen[r.video_id]
        if split is not r.split:
            raise SplitLeakError(
                f"video {r.video_id!r} is in {split.value} (line {first}) and {r.split.value}", line
            )
        if label is not r.binary_label:
            raise ManifestError(
                f"video {r.video_id!r} mixes {label.value} (line {first}) and {r.binary_label.value} frames", line
            )


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Parse and validate a JSONL manifest; errors carry the 1-based line number."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records: List[SampleRecord] = []
    lines: List[int] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
            if not isinstance(data, dict):
                raise ManifestError("each line must be a JSON object", lineno)
            try:
                records.append(SampleRecord.from_dict(data))
            except ManifestError:
                raise
            except DataError as exc:
                raise ManifestError(str(exc), lineno) from None
            lines.append(lineno)
    check_video_consistency(records, lines)
    manifest = Manifest(records, path.parent, path)
    logger.info("Loaded %d records from %s", len(records), path)
    return manifest


def write_manifest(records: Iterable[SampleRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json())
            f.write("\n")
    return path


def holdout_method_split(records: Sequence[SampleRecord], method: int) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Split for unseen-method evaluation.

    Returns ``(train_view, test_view)``: the train view drops every record of
    the held-out method; the test view keeps REAL TEST records and only the
    held-out method's FAKE TEST records.
    """
    present = {r.method_label for r in records if r.method_label is not None}
    if method not in present:
        raise DataError(f"held-out method {method} does not occur in the manifest")
    train_view = [r for r in records if r.method_label != method and r.split is not Split.TEST]
    test_view = [
        r for r in records
        if r.split is Split.TEST and (not r.is_fake or r.method_label == method)
    ]
    return train_view, test_view


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

class FaceBoxSource(str, Enum):
    MANIFEST_BOX = "manifest_box"
    FULL_IMAGE = "full_image"


@dataclass(frozen=True)
class PreprocessSpec:
    crop_enlarge_factor: float = 1.3
    output_size: int = 299
    face_box_source: FaceBoxSource = FaceBoxSource.FULL_IMAGE
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "face_box_source", FaceBoxSource(self.face_box_source))
        if self.crop_enlarge_factor < 1:
            raise ContractViolation("crop_enlarge_factor must be at least 1")
        if self.output_size <= 0:
            raise ContractViolation("output_size must be positive")


def xywh_to_corners(box: Sequence[int]) -> Tuple[float, float, float, float]:
    x, y, w, h = box
    return (float(x), float(y), float(x + w), float(y + h))


def enlarged_crop_box(box: Sequence[float], image_size: Tuple[int, int], factor: float) -> Tuple[int, int, int, int]:
    """Scale a corner box ``(x1, y1, x2, y2)`` about its center and clamp to the image."""
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 <= x1 or y2 <= y1:
        raise ContractViolation(f"empty or inverted face box {tuple(box)}")
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    half_w, half_h = (x2 - x1) * factor / 2.0, (y2 - y1) * factor / 2.0
    width, height = image_size
    left = max(0, int(round(cx - half_w)))
    top = max(0, int(round(cy - half_h)))
    right = min(width, int(round(cx + half_w)))
    bottom = min(height, int(round(cy + half_h)))
    if right <= left or bottom <= top:
        raise ContractViolation(f"face box {tuple(box)} lies outside the {width}x{height} image")
    return left, top, right, bottom


def preprocess(image: Union[Image.Image, np.ndarray], face_box: Optional[Sequence[float]],
               spec: PreprocessSpec) -> np.ndarray:
    """Crop (optionally), resize bilinearly and normalise to ``[S, S, 3]`` float32.

    ``face_box`` is in corner form ``(x1, y1, x2, y2)``.
    """
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")
    if spec.face_box_source is FaceBoxSource.MANIFEST_BOX:
        if face_box is None:
            raise ContractViolation("MANIFEST_BOX preprocessing needs a face box")
        image = image.crop(enlarged_crop_box(face_box, image.size, spec.crop_enlarge_factor))
    size = (spec.output_size, spec.output_size)
    if image.size != size:
        image = image.resize(size, Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return (arr - np.asarray(spec.mean, dtype=np.float32)) / np.asarray(spec.std, dtype=np.float32)


class FrameStore:
    """Loads, preprocesses and memoises frames as channels-first tensors."""

    def __init__(self, manifest: Manifest, spec: PreprocessSpec):
        self.manifest = manifest
        self.spec = spec
        self._cache: Dict[str, torch.Tensor] = {}

    def load(self, record: SampleRecord) -> torch.Tensor:
        cached = self._cache.get(record.image_path)
        if cached is not None:
            return cached
        path = self.manifest.resolve(record)
        try:
            with Image.open(path) as img:
                box = xywh_to_corners(record.face_box) if record.face_box is not None else None
                arr = preprocess(img, box, self.spec)
        except FileNotFoundError:
            raise DataError(f"image not found for sample {record.image_path!r}: {path}") from None
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
        tensor = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        self._cache[record.image_path] = tensor
        return tensor

    def batch(self, records: Sequence[SampleRecord]) -> torch.Tensor:
        return torch.stack([self.load(r) for r in records])


# ---------------------------------------------------------------------------
# Synthetic factor dataset
# ---------------------------------------------------------------------------

ARTIFACT_FAMILIES = ("grid", "blur_band", "color_shift", "checker_corner")


@dataclass(frozen=True)
class FactorDatasetSpec:
    """Images whose identity, real/fake bit and forgery method are known.

    ``images_per_combo`` is the number of videos rendered for every
    (identity, class, method) combination.
    """

    n_identities: int = 8
    n_methods: int = 4
    images_per_combo: int = 5
    image_size: int = 32
    frames_per_video: int = 8
    seed: int = 0
    noise_std: float = 0.02
    artifact_strength: float = 0.18
    embedding_noise: float = 0.05

    def __post_init__(self):
        for name in ("n_identities", "n_methods", "images_per_combo", "image_size", "frames_per_video"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.image_size < 8:
            raise ContractViolation("image_size must be at least 8")

    @property
    def n_records(self) -> int:
        return self.n_identities * (1 + self.n_methods) * self.images_per_combo * self.frames_per_video


def _split_for(video_index: int, n_videos: int) -> Split:
    if n_videos >= 3 and video_index == n_videos - 1:
        return Split.TEST
    if n_videos >= 3 and video_index == n_videos - 2:
        return Split.VAL
    if n_videos == 2 and video_index == 1:
        return Split.TEST
    return Split.TRAIN


def _identity_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency colour layout: a random 4x4 colour grid, bilinearly upsampled."""
    grid = (rng.uniform(0.15, 0.85, size=(4, 4, 3)) * 255).astype(np.uint8)
    up = Image.fromarray(grid).resize((size, size), Image.BILINEAR)
    return np.asarray(up, dtype=np.float32) / 255.0


def _artifact(method: int, size: int, strength: float) -> np.ndarray:
    """Additive artifact for one forgery method; families cycle with a varying period."""
    family = ARTIFACT_FAMILIES[method % len(ARTIFACT_FAMILIES)]
    variant = method // len(ARTIFACT_FAMILIES)
    yy, xx = np.mgrid[0:size, 0:size]
    art = np.zeros((size, size, 3), dtype=np.float32)
    if family == "grid":
        period = 4 + variant
        mask = ((yy % period) == 0) | ((xx % period) == 0)
        art[mask] = strength
    elif family == "blur_band":
        lo, hi = size // 3 + variant, 2 * size // 3 + variant
        band = (yy >= lo) & (yy < hi)
        art[band] = -strength * 0.5 + strength * np.sin(xx[band] * 1.7)[:, None] * 0.5
    elif family == "color_shift":
        art[..., (variant % 3)] += strength
        art[..., ((variant + 2) % 3)] -= strength
    else:
        corner = size // 3
        checker = ((yy // 2 + xx // 2) % 2 == 0) & (yy < corner) & (xx >= size - corner)
        art[checker] = strength * 1.5
        art[(yy < corner) & (xx >= size - corner) & ~checker] = -strength * 1.5
    return art


def generate_factor_dataset(spec: FactorDatasetSpec, out_dir: Union[str, Path]) -> Path:
    """Render the factor dataset, its manifest and the identity embedding table.

    Returns the manifest path. Output is fully determined by ``spec.seed``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AdvForensicsError(f"cannot create {out_dir}: {exc}") from exc

    rng = component_rng(spec.seed, "factor-dataset")
    size = spec.image_size
    patterns = [_identity_pattern(rng, size) for _ in range(spec.n_identities)]
    artifacts = [_artifact(m, size, spec.artifact_strength) for m in range(spec.n_methods)]

    records: List[SampleRecord] = []
    classes: List[Optional[int]] = [None] + list(range(spec.n_methods))
    total = spec.n_records
    with tqdm(total=total, desc="rendering", unit="img", disable=None) as bar:
        for identity in range(spec.n_identities):
            for method in classes:
                label = BinaryLabel.REAL if method is None else BinaryLabel.FAKE
                tag = "real" if method is None else f"m{method}"
                for v in range(spec.images_per_combo):
                    video_id = f"id{identity:03d}_{tag}_v{v:02d}"
                    split = _split_for(v, spec.images_per_combo)
                    # small per-video shift of the identity pattern
                    shift = rng.integers(-1, 2, size=2)
                    base = np.roll(patterns[identity], tuple(int(s) for s in shift), axis=(0, 1))
                    if method is not None:
                        base = base + artifacts[method]
                    for frame in range(spec.frames_per_video):
                        img = base + rng.normal(0.0, spec.noise_std, size=base.shape)
                        pixels = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
                        rel = f"images/{video_id}_f{frame:03d}.png"
                        Image.fromarray(pixels).save(out_dir / rel, format="PNG", optimize=False)
                        records.append(SampleRecord(rel, label, method, identity, video_id, split))
                        bar.update(1)

    check_video_consistency(records)
    manifest_path = write_manifest(records, out_dir / MANIFEST_FILE)
    emb_path = out_dir / EMBEDDINGS_FILE
    if emb_path.exists():
        emb_path.unlink()
    oracle = SyntheticFactorOracle(spec.seed, spec.embedding_noise)
    with EmbeddingCache(emb_path) as cache:
        for record in records:
            cache.put(record.image_path, oracle.provider_id.value, oracle.embed(record))
    (out_dir / "factor_spec.json").write_text(
        json.dumps({k: getattr(spec, k) for k in spec.__dataclass_fields__}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    logger.info("Wrote %d records to %s", len(records), manifest_path)
    return manifest_path
