"""Frame/video metrics, the clustering-accuracy probe and feature export."""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata
from sklearn.cluster import KMeans
from sklearn.metrics import roc_curve
from sklearn.metrics.cluster import contingency_matrix
from sklearn.mixture import GaussianMixture

from .core import SampleRecord, derive_seed
from .errors import ClusteringError, ContractViolation, DataError, MetricError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Scalar metrics
# ---------------------------------------------------------------------------

def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ContractViolation(f"{s.shape[0]} scores but {y.shape[0]} labels")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(((s > threshold).astype(int) == y).mean())


def video_level_scores(frame_scores: Iterable[Tuple[str, float]], max_frames_per_video: int = 110,
                       known_videos: Optional[Iterable[str]] = None) -> List[Tuple[str, float]]:
    """Mean of the first ``max_frames_per_video`` frame scores of each video, in first-seen order."""
    known = set(known_videos) if known_videos is not None else None
    grouped: "OrderedDict[str, List[float]]" = OrderedDict()
    for video_id, score in frame_scores:
        if known is not None and video_id not in known:
            raise DataError(f"unknown video_id {video_id!r}")
        if not 0.0 <= score <= 1.0:
            raise ContractViolation(f"frame score {score} of video {video_id!r} outside [0, 1]")
        frames = grouped.setdefault(video_id, [])
        if len(frames) < max_frames_per_video:
            frames.append(float(score))
    return [(vid, float(np.mean(frames))) for vid, frames in grouped.items()]


@dataclass(frozen=True)
class EvalReport:
    frame_auc: float
    frame_acc: float
    video_auc: float
    video_acc: float
    n_frames: int
    n_videos: int
    split: str = "test"
    manifest: Optional[str] = None
    manifest_sha256: Optional[str] = None
    checkpoint: Optional[str] = None

    def __post_init__(self):
        for name in ("frame_auc", "frame_acc", "video_auc", "video_acc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name}={getattr(self, name)} outside [0, 1]")
        if self.n_frames <= 0 or self.n_videos <= 0:
            raise ContractViolation("report counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_eval_report(records: Sequence[SampleRecord], scores: Sequence[float],
                      max_frames_per_video: int = 110, **meta) -> EvalReport:
    if len(records) != len(scores):
        raise ContractViolation(f"{len(records)} records but {len(scores)} scores")
    if not records:
        raise DataError("cannot evaluate an empty split")
    labels = [r.binary_label.as_int for r in records]
    video_label = {r.video_id: r.binary_label.as_int for r in records}
    videos = video_level_scores(
        ((r.video_id, float(s)) for r, s in zip(records, scores)), max_frames_per_video, video_label
    )
    v_scores = [s for _, s in videos]
    v_labels = [video_label[v] for v, _ in videos]
    return EvalReport(
        frame_auc=roc_auc(scores, labels),
        frame_acc=accuracy(scores, labels),
        video_auc=roc_auc(v_scores, v_labels),
        video_acc=accuracy(v_scores, v_labels),
        n_frames=len(records),
        n_videos=len(videos),
        **meta,
    )


def write_roc_curve(scores: Sequence[float], labels: Sequence[int], path: Union[str, Path]) -> Path:
    fpr, tpr, thresholds = roc_curve(np.asarray(labels).astype(int), np.asarray(scores, dtype=np.float64))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for row in zip(fpr, tpr, thresholds):
            writer.writerow([repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------
# Clustering-accuracy probe
# ---------------------------------------------------------------------------

class ProbeTarget(str, Enum):
    FORGERY_METHOD = "method"
    IDENTITY = "identity"


class ProbeAlgorithm(str, Enum):
    KMEANS = "kmeans"
    GAUSSIAN_MIXTURE = "gmm"


@dataclass(frozen=True)
class ClusterProbeReport:
    probe_target: ProbeTarget
    algorithm: ProbeAlgorithm
    accuracy: float
    k: int
    n_samples: int = 0

    def __post_init__(self):
        if self.accuracy < 1.0 / self.k - 1e-12:
            raise ContractViolation(f"probe accuracy {self.accuracy} below 1/k={1.0 / self.k}")

    def to_dict(self) -> dict:
        return {
            "probe_target": self.probe_target.value,
            "algorithm": self.algorithm.value,
            "accuracy": self.accuracy,
            "k": self.k,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cluster_accuracy(labels: Sequence[int], clusters: Sequence[int]) -> float:
    """Accuracy under the optimal one-to-one cluster/label matching (Hungarian)."""
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.shape != clusters.shape:
        raise ContractViolation(f"{labels.shape[0]} labels but {clusters.shape[0]} cluster ids")
    if labels.size == 0:
        raise MetricError("cluster accuracy of an empty set")
    table = contingency_matrix(labels, clusters)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / labels.size)


def clustering_accuracy_probe(features: np.ndarray, target_labels: Sequence[int],
                              algorithm: Union[ProbeAlgorithm, str] = ProbeAlgorithm.KMEANS,
                              k: Optional[int] = None, seed: int = 0,
                              target: Union[ProbeTarget, str] = ProbeTarget.FORGERY_METHOD,
                              n_init: int = 10) -> ClusterProbeReport:
    algorithm = ProbeAlgorithm(algorithm)
    target = ProbeTarget(target)
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(target_labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractViolation(f"features {x.shape} do not match {y.shape[0]} labels")
    distinct = int(np.unique(y).size)
    k = distinct if k is None else int(k)
    m = x.shape[0]
    if k > m:
        raise ClusteringError(f"k={k} exceeds the number of samples {m}")
    if k != distinct:
        raise ClusteringError(f"k={k} but the targets have {distinct} distinct labels")
    if k == 1:
        return ClusterProbeReport(target, algorithm, 1.0, 1, m)
    if np.ptp(x, axis=0).max() == 0:
        raise ClusteringError("all feature rows are identical")
    random_state = derive_seed(seed, "probe") % (2**32)
    if algorithm is ProbeAlgorithm.KMEANS:
        clusters = KMeans(n_clusters=k, n_init=n_init, random_state=random_state).fit_predict(x)
    else:
        gmm = GaussianMixture(n_components=k, covariance_type="diag", n_init=n_init,
                              reg_covar=1e-4, random_state=random_state)
        clusters = gmm.fit(x).predict(x)
    acc = cluster_accuracy(y, clusters)
    logger.info("%s probe (%s, k=%d, n=%d): accuracy %.4f", target.value, algorithm.value, k, m, acc)
    return ClusterProbeReport(target, algorithm, acc, k, m)


def probe_subset(records: Sequence[SampleRecord], target: Union[ProbeTarget, str]) -> Tuple[List[int], List[int]]:
    """Indices and labels a probe uses: FAKE samples for methods, REAL samples for identities."""
    target = ProbeTarget(target)
    idx, labels = [], []
    for i, r in enumerate(records):
        if target is ProbeTarget.FORGERY_METHOD and r.is_fake:
            if r.method_label is None:
                raise DataError(f"fake sample {r.image_path!r} has no method label")
            idx.append(i)
            labels.append(r.method_label)
        elif target is ProbeTarget.IDENTITY and not r.is_fake:
            if r.identity_label is None:
                raise DataError(f"real sample {r.image_path!r} has no identity label")
            idx.append(i)
            labels.append(r.identity_label)
    if not idx:
        raise DataError(f"no samples carry {target.value} labels")
    return idx, labels


# ---------------------------------------------------------------------------
# Model inference
# ---------------------------------------------------------------------------

@torch.no_grad()
def run_inference(model, store, records: Sequence[SampleRecord], batch_size: int = 256,
                  features: bool = False) -> np.ndarray:
    """Fake probabilities (or generator features) for ``records`` in order, in eval mode."""
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    chunks = []
    try:
        for start in range(0, len(records), batch_size):
            images = store.batch(records[start:start + batch_size]).to(device)
            z = model.encode(images)
            out = z if features else torch.softmax(model.classify(z), dim=1)[:, 1]
            chunks.append(out.double().cpu().numpy())
    finally:
        model.train(was_training)
    if not chunks:
        return np.zeros((0,), dtype=np.float64)
    return np.concatenate(chunks)


def export_features(model, store, records: Sequence[SampleRecord], out_path: Union[str, Path],
                    batch_size: int = 256) -> Path:
    """CSV of sample metadata and generator features, one row per record."""
    feats = run_inference(model, store, records, batch_size, features=True)
    dim = feats.shape[1] if feats.ndim == 2 else 0
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample_id", "binary_label", "method_label", "identity_label"]
                        + [f"f{i}" for i in range(dim)])
        for r, row in zip(records, feats):
            writer.writerow(
                [r.sample_id, r.binary_label.value,
                 "" if r.method_label is None else r.method_label,
                 "" if r.identity_label is None else r.identity_label]
                + [repr(float(v)) for v in row]
            )
    logger.info("Exported %d x %d features to %s", len(records), dim, out_path)
    return out_path
