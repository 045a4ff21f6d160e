"""Identity supervision: embedding providers, similarity labels, tau calibration, pseudo labels."""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.cluster import KMeans

from .core import SampleRecord, Split, component_rng, derive_seed, pair_count
from .errors import (
    CacheIntegrityError,
    CalibrationError,
    ClusteringError,
    ContractViolation,
    DataError,
    EmbeddingProviderError,
)

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 512


class ProviderId(str, Enum):
    ARCFACE_ONNX_FILE = "arcface_onnx_file"
    SYNTHETIC_FACTOR = "synthetic_factor"
    CACHE_ONLY = "cache_only"


# ---------------------------------------------------------------------------
# Embedding cache
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"AFEMB\x00"
CACHE_VERSION = 2
_VECTOR = struct.Struct("<" + "f" * EMBEDDING_DIM)
_KEYLEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_HEADER = struct.Struct("<6sH")


def cache_key(image_id: str, provider: str) -> str:
    return f"{provider}\x1f{image_id}"


class EmbeddingCache:
    """Append-only binary store of 512-d float32 vectors with a JSON index sidecar.

    Layout: magic, version, then repeated ``(u32 key length, utf-8 key, 512 <f4,
    u32 crc32 of key and vector)``.
    Keys combine provider id and image id. Writes go through one lock.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.index_path = self.path.with_name(self.path.name + ".idx")
        self._index: Dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load_index()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as f:
                f.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION))
            self._write_index()

    def __enter__(self) -> "EmbeddingCache":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        with self._lock:
            self._write_index()

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: Tuple[str, str]) -> bool:
        image_id, provider = key
        return cache_key(image_id, provider) in self._index

    def _write_index(self) -> None:
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps({"size": self.path.stat().st_size, "offsets": self._index}, sort_keys=True),
            encoding="utf-8",
        )
        os.replace(tmp, self.index_path)

    def _load_index(self) -> None:
        size = self.path.stat().st_size
        if self.index_path.exists():
            try:
                meta = json.loads(self.index_path.read_text(encoding="utf-8"))
                if meta.get("size") == size:
                    self._index = {str(k): int(v) for k, v in meta["offsets"].items()}
                    self._check_header()
                    return
            except (ValueError, KeyError, TypeError):
                logger.warning("Ignoring unreadable cache index %s", self.index_path)
        self._index = self._scan()

    def _check_header(self) -> None:
        with open(self.path, "rb") as f:
            head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CacheIntegrityError(f"{self.path}: truncated header")
        magic, version = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise CacheIntegrityError(f"{self.path}: not an embedding cache (bad magic)")
        if version != CACHE_VERSION:
            raise CacheIntegrityError(f"{self.path}: unsupported cache version {version}")

    def _scan(self) -> Dict[str, int]:
        self._check_header()
        index: Dict[str, int] = {}
        with open(self.path, "rb") as f:
            f.seek(_HEADER.size)
            last_key: Optional[str] = None
            while True:
                raw = f.read(_KEYLEN.size)
                if not raw:
                    break
                if len(raw) != _KEYLEN.size:
                    raise CacheIntegrityError(f"{self.path}: truncated record after", last_key)
                (n,) = _KEYLEN.unpack(raw)
                key_bytes = f.read(n)
                try:
                    key = key_bytes.decode("utf-8")
                except UnicodeDecodeError:
                    raise CacheIntegrityError(f"{self.path}: undecodable key after", last_key) from None
                if len(key_bytes) != n:
                    raise CacheIntegrityError(f"{self.path}: truncated key", key)
                offset = f.tell()
                if len(f.read(_VECTOR.size + _CRC.size)) != _VECTOR.size + _CRC.size:
                    raise CacheIntegrityError(f"{self.path}: truncated vector", key)
                index[key] = offset
                last_key = key
        return index

    def put(self, image_id: str, provider: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype="<f4").reshape(-1)
        if vec.shape[0] != EMBEDDING_DIM:
            raise ContractViolation(f"embedding for {image_id!r} has dimension {vec.shape[0]}, expected {EMBEDDING_DIM}")
        key = cache_key(image_id, provider)
        key_bytes = key.encode("utf-8")
        with self._lock:
            with open(self.path, "ab") as f:
                f.write(_KEYLEN.pack(len(key_bytes)))
                f.write(key_bytes)
                offset = f.tell()
                payload = vec.tobytes()
                f.write(payload)
                f.write(_CRC.pack(zlib.crc32(key_bytes + payload)))
            self._index[key] = offset

    def get(self, image_id: str, provider: str) -> Optional[np.ndarray]:
        """The stored vector, or ``None`` on a miss."""
        key = cache_key(image_id, provider)
        offset = self._index.get(key)
        if offset is None:
            return None
        with open(self.path, "rb") as f:
            f.seek(offset)
            raw = f.read(_VECTOR.size + _CRC.size)
        if len(raw) != _VECTOR.size + _CRC.size:
            raise CacheIntegrityError(f"{self.path}: truncated vector", key)
        payload, (stored,) = raw[:_VECTOR.size], _CRC.unpack(raw[_VECTOR.size:])
        if zlib.crc32(key.encode("utf-8") + payload) != stored:
            raise CacheIntegrityError(f"{self.path}: checksum mismatch", key)
        return np.frombuffer(payload, dtype="<f4").astype(np.float32)


# ---------------------------------------------------------------------------
# Embedding providers
# ---------------------------------------------------------------------------

class EmbeddingOracle(Protocol):
    provider_id: ProviderId

    def embed(self, record: SampleRecord) -> np.ndarray:
        """512-d embedding of one face; deterministic per image."""
        ...


class SyntheticFactorOracle:
    """One fixed random unit vector per identity plus per-image noise of fixed norm."""

    provider_id = ProviderId.SYNTHETIC_FACTOR

    def __init__(self, seed: int = 0, noise_norm: float = 0.05):
        self.seed = seed
        self.noise_norm = noise_norm
        self._axes: Dict[int, np.ndarray] = {}

    def identity_axis(self, identity: int) -> np.ndarray:
        axis = self._axes.get(identity)
        if axis is None:
            rng = component_rng(self.seed, f"identity-axis-{identity}")
            axis = rng.standard_normal(EMBEDDING_DIM)
            axis /= np.linalg.norm(axis)
            self._axes[identity] = axis
        return axis

    def embed(self, record: SampleRecord) -> np.ndarray:
        if record.identity_label is None:
            raise EmbeddingProviderError(
                f"sample {record.image_path!r} has no identity to synthesise from", self.provider_id.value
            )
        noise = component_rng(self.seed, f"image-noise-{record.image_path}").standard_normal(EMBEDDING_DIM)
        noise *= self.noise_norm / np.linalg.norm(noise)
        return (self.identity_axis(record.identity_label) + noise).astype(np.float32)


class ArcFaceOnnxOracle:
    """Recognition model exported to ONNX (112x112 input, 512-d output), run through OpenCV DNN.

    Face alignment is the caller's concern; frames are resized to 112x112,
    using the manifest face box when present.
    """

    provider_id = ProviderId.ARCFACE_ONNX_FILE
    input_size = (112, 112)

    def __init__(self, model_path: Union[str, Path], resolve):
        try:
            import cv2
        except ImportError as exc:
            raise EmbeddingProviderError(
                "OpenCV is required (pip install advforensics[arcface])", self.provider_id.value
            ) from exc
        if not Path(model_path).exists():
            raise EmbeddingProviderError(f"model file not found: {model_path}", self.provider_id.value)
        self._cv2 = cv2
        self._net = cv2.dnn.readNetFromONNX(str(model_path))
        self._net.setPreferableBackend(cv2.dnn.DNN_BACKEND_OPENCV)
        self._net.setPreferableTarget(cv2.dnn.DNN_TARGET_CPU)
        self._resolve = resolve
        self._lock = threading.Lock()

    def embed(self, record: SampleRecord) -> np.ndarray:
        cv2 = self._cv2
        path = self._resolve(record)
        img = cv2.imread(str(path))
        if img is None:
            raise EmbeddingProviderError(f"cannot read image {path}", self.provider_id.value)
        if record.face_box is not None:
            x, y, w, h = record.face_box
            img = img[max(0, y):y + h, max(0, x):x + w]
        blob = cv2.dnn.blobFromImage(img, 1.0 / 127.5, self.input_size, (127.5, 127.5, 127.5), swapRB=True)
        with self._lock:
            self._net.setInput(blob)
            out = self._net.forward()
        vec = np.asarray(out, dtype=np.float32).reshape(-1)
        if vec.shape[0] != EMBEDDING_DIM:
            raise EmbeddingProviderError(
                f"model emitted {vec.shape[0]}-d vectors, expected {EMBEDDING_DIM}", self.provider_id.value
            )
        return vec


class CacheOnlyOracle:
    """Serves embeddings from a cache written by another provider; misses are errors."""

    provider_id = ProviderId.CACHE_ONLY

    def __init__(self, cache: EmbeddingCache, source_provider: Union[ProviderId, str]):
        self.cache = cache
        self.source_provider = ProviderId(source_provider).value

    def embed(self, record: SampleRecord) -> np.ndarray:
        vec = self.cache.get(record.image_path, self.source_provider)
        if vec is None:
            raise EmbeddingProviderError(
                f"no cached embedding for image {record.image_path!r}", self.provider_id.value
            )
        return vec


class CachedOracle:
    """Read-through cache in front of an expensive provider."""

    def __init__(self, oracle: EmbeddingOracle, cache: EmbeddingCache, workers: int = 1):
        self.oracle = oracle
        self.cache = cache
        self.workers = workers
        self.provider_id = oracle.provider_id

    def embed(self, record: SampleRecord) -> np.ndarray:
        return self.embed_many([record])[0]

    def embed_many(self, records: Sequence[SampleRecord]) -> List[np.ndarray]:
        provider = self.provider_id.value
        out: List[Optional[np.ndarray]] = [self.cache.get(r.image_path, provider) for r in records]
        missing = [i for i, v in enumerate(out) if v is None]
        if missing:
            if self.workers > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    computed = list(pool.map(lambda i: self.oracle.embed(records[i]), missing))
            else:
                computed = [self.oracle.embed(records[i]) for i in missing]
            for i, vec in zip(missing, computed):
                self.cache.put(records[i].image_path, provider, vec)
                out[i] = vec
        return out  # type: ignore[return-value]


def embed_records(oracle, records: Sequence[SampleRecord]) -> np.ndarray:
    if hasattr(oracle, "embed_many"):
        vectors = oracle.embed_many(records)
    else:
        vectors = [oracle.embed(r) for r in records]
    return np.stack([np.asarray(v, dtype=np.float64) for v in vectors])


# ---------------------------------------------------------------------------
# Similarity supervision
# ---------------------------------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EmbeddingProviderError("cosine similarity of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pairwise_cosine(embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarity of every canonical pair (m < n, row-major)."""
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise EmbeddingProviderError(f"zero-norm embedding at rows {np.flatnonzero(norms == 0).tolist()}")
    unit = e / norms[:, None]
    rows, cols = np.triu_indices(e.shape[0], k=1)
    return np.clip(np.einsum("ij,ij->i", unit[rows], unit[cols]), -1.0, 1.0)


@dataclass(frozen=True)
class SimilaritySupervision:
    similarities: np.ndarray
    labels: np.ndarray
    tau: float

    def __post_init__(self):
        if self.similarities.shape != self.labels.shape:
            raise ContractViolation("similarities and labels differ in length")
        if self.similarities.size and (self.similarities.min() < -1 or self.similarities.max() > 1):
            raise ContractViolation("similarities must lie in [-1, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def label_tensor(self, device: Union[str, torch.device] = "cpu") -> torch.Tensor:
        return torch.as_tensor(self.labels, dtype=torch.float32, device=device)

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0


def supervision_from_embeddings(embeddings: np.ndarray, tau: float) -> SimilaritySupervision:
    if embeddings.shape[0] < 2:
        raise ContractViolation(f"similarity supervision needs at least 2 samples, got {embeddings.shape[0]}")
    sims = pairwise_cosine(embeddings)
    # strict '>' : a tie at tau is labelled 0
    return SimilaritySupervision(sims, (sims > tau).astype(np.int64), float(tau))


def build_similarity_supervision(records: Sequence[SampleRecord], oracle, tau: float) -> SimilaritySupervision:
    return supervision_from_embeddings(embed_records(oracle, records), tau)


@dataclass(frozen=True)
class CalibrationReport:
    candidate_range: Tuple[float, float]
    grid: List[float]
    cumulative_curve: List[Tuple[float, float]]
    quantile_band: Tuple[float, float]
    n_pairs: int

    def to_dict(self) -> dict:
        return {
            "candidate_range": list(self.candidate_range),
            "grid": self.grid,
            "quantile_band": list(self.quantile_band),
            "n_pairs": self.n_pairs,
            "cumulative_curve": [list(p) for p in self.cumulative_curve],
        }


def tau_grid(lo: float, hi: float, step: float) -> List[float]:
    start = np.ceil(lo / step - 1e-9) * step
    grid = [round(float(v), 10) for v in np.arange(start, hi + step * 1e-6, step) if v <= hi + 1e-12]
    return grid or [round(float((lo + hi) / 2.0), 10)]


def calibrate_from_similarities(sims: np.ndarray, quantile_band=(0.60, 0.85), grid_step: float = 0.01,
                                curve_points: int = 201) -> CalibrationReport:
    sims = np.asarray(sims, dtype=np.float64)
    lo_q, hi_q = quantile_band
    if not 0.0 <= lo_q <= hi_q <= 1.0:
        raise CalibrationError(f"quantile band {quantile_band} must satisfy 0 <= lo <= hi <= 1")
    if sims.size == 0 or np.ptp(sims) == 0:
        raise CalibrationError("all sampled similarities are equal; nothing to calibrate")
    lo, hi = (float(v) for v in np.quantile(sims, [lo_q, hi_q]))
    probs = np.linspace(0.0, 1.0, curve_points)
    values = np.quantile(sims, probs)
    curve = [(float(v), float(p)) for v, p in zip(values, probs)]
    return CalibrationReport((lo, hi), tau_grid(lo, hi, grid_step), curve, (lo_q, hi_q), int(sims.size))


def calibrate_tau(records: Sequence[SampleRecord], oracle, n_batches: int = 100, batch_size: int = 64,
                  quantile_band: Tuple[float, float] = (0.60, 0.85), grid_step: float = 0.01,
                  seed: int = 0) -> CalibrationReport:
    """Empirical distribution of within-batch pair similarities over random TRAIN batches."""
    train = [r for r in records if r.split is Split.TRAIN]
    if n_batches <= 0:
        raise CalibrationError("n_batches must be positive")
    if len(train) < max(batch_size, 2):
        raise DataError(f"calibration needs at least {batch_size} TRAIN records, found {len(train)}")
    rng = component_rng(seed, "calibration")
    unique = {r.image_path: r for r in train}
    chosen: List[np.ndarray] = [rng.choice(len(train), size=batch_size, replace=False) for _ in range(n_batches)]
    needed = sorted({train[i].image_path for idx in chosen for i in idx})
    vectors = dict(zip(needed, embed_records(oracle, [unique[k] for k in needed])))
    sims = [pairwise_cosine(np.stack([vectors[train[i].image_path] for i in idx])) for idx in chosen]
    report = calibrate_from_similarities(np.concatenate(sims), quantile_band, grid_step)
    logger.info("Calibrated tau over %d pairs: candidate range [%.4f, %.4f], %d grid points",
                report.n_pairs, *report.candidate_range, len(report.grid))
    return report


# ---------------------------------------------------------------------------
# Pseudo identity labels
# ---------------------------------------------------------------------------

def derive_pseudo_identity_labels(records: Sequence[SampleRecord], oracle, k: int, seed: int = 0) -> List[int]:
    """K-means cluster ids over recognition embeddings, one per record."""
    if k < 1:
        raise ClusteringError(f"k must be positive, got {k}")
    if k == 1:
        return [0] * len(records)
    emb = embed_records(oracle, records)
    distinct = np.unique(np.round(emb, 12), axis=0).shape[0]
    if distinct < k:
        raise ClusteringError(f"{distinct} distinct embeddings cannot form {k} clusters")
    km = KMeans(n_clusters=k, n_init=10, random_state=derive_seed(seed, "kmeans") % (2**32))
    labels = km.fit_predict(emb)
    return [int(v) for v in labels]


def with_identity_labels(records: Sequence[SampleRecord], labels: Sequence[int]) -> List[SampleRecord]:
    if len(records) != len(labels):
        raise ContractViolation(f"{len(records)} records but {len(labels)} labels")
    return [
        SampleRecord(r.image_path, r.binary_label, r.method_label, int(l), r.video_id, r.split, r.face_box)
        for r, l in zip(records, labels)
    ]
