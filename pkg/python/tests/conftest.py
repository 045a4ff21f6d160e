"""Shared pytest fixtures for advforensics tests."""

import json
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pytest

from advforensics.core import AdversarialConfig, BinaryLabel, SampleRecord, Split
from advforensics.data import FactorDatasetSpec, generate_factor_dataset, load_manifest

# Paths
PROJECT_ROOT = Path(__file__).parent.parent.parent
FIXTURES_DIR = PROJECT_ROOT / "fixtures"

# Small enough for CPU smoke runs: 3 identities x (real + 2 methods) x 3 videos x 4 frames
TINY_SPEC = FactorDatasetSpec(
    n_identities=3,
    n_methods=2,
    images_per_combo=3,
    image_size=16,
    frames_per_video=4,
    seed=5,
)


def load_fixture(name: str) -> Union[Dict[str, Any], List[Dict[str, Any]]]:
    """Load a JSON fixture, or a JSONL fixture as a list of objects."""
    path = FIXTURES_DIR / name
    with open(path, encoding="utf-8") as f:
        if path.suffix == ".jsonl":
            return [json.loads(line) for line in f if line.strip()]
        return json.load(f)


def make_record(i: int, fake: bool = False, method=None, identity=0, split=Split.TRAIN, video=None) -> SampleRecord:
    """In-memory record; no image on disk."""
    label = BinaryLabel.FAKE if fake else BinaryLabel.REAL
    if fake and method is None:
        method = 0
    return SampleRecord(
        image_path=f"img/{i:05d}.png",
        binary_label=label,
        method_label=method if fake else None,
        identity_label=identity,
        video_id=video or f"vid{i:05d}",
        split=split,
    )


@pytest.fixture
def smoke_config() -> AdversarialConfig:
    """Tiny similarity-mode config matching the tiny factor dataset."""
    return AdversarialConfig.from_dict(load_fixture("config_smoke.json"))


@pytest.fixture
def small_manifest_rows() -> List[Dict[str, Any]]:
    """Rows of manifest_small.jsonl."""
    return load_fixture("manifest_small.jsonl")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """Manifest path of a tiny rendered factor dataset, shared by the session."""
    out = tmp_path_factory.mktemp("factor")
    return generate_factor_dataset(TINY_SPEC, out)


@pytest.fixture
def tiny_manifest(tiny_dataset):
    """Loaded manifest of the tiny factor dataset."""
    return load_manifest(tiny_dataset)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded numpy generator for randomized oracle tests."""
    return np.random.default_rng(20240607)
