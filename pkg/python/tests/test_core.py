"""Configuration, record invariants and seeded randomness."""

import json

import numpy as np
import pytest
import torch

from advforensics.core import (
    AdversarialConfig,
    BinaryLabel,
    FeatureBatch,
    ForgeryMode,
    GeneratorKind,
    IdentityMode,
    SampleRecord,
    Split,
    component_rng,
    derive_seed,
    pair_count,
    validate_config,
)
from advforensics.errors import AdvForensicsError, ConfigError, ContractViolation, DataError

from .conftest import load_fixture


class TestValidateConfig:
    """validate_config collects violations without raising."""

    def test_defaults_are_valid(self):
        """The default config has no violations."""
        result = validate_config(AdversarialConfig())
        assert result.ok
        assert result.violations == ()

    def test_odd_batch_size(self):
        """An odd batch cannot be split half real, half fake."""
        result = validate_config(AdversarialConfig(batch_size=63))
        assert not result.ok
        assert "batch_size must be even" in result.violations

    def test_hard_label_needs_identity_count(self):
        """HARD_LABEL without n_identities is rejected."""
        result = validate_config(AdversarialConfig(identity_mode=IdentityMode.HARD_LABEL))
        assert "identity_mode=hard_label requires n_identities" in result.violations

    def test_pseudo_label_needs_cluster_count(self):
        """PSEUDO_LABEL uses n_identities as its cluster count."""
        result = validate_config(AdversarialConfig(identity_mode=IdentityMode.PSEUDO_LABEL))
        assert any("pseudo_label" in v for v in result.violations)

    def test_stop_warmup_and_retention_ranges(self):
        """The stop warm-up is a fraction below 1 and at least one checkpoint is kept."""
        result = validate_config(AdversarialConfig(stop_warmup=1.0, keep_checkpoints=0))
        assert result.violations == ("stop_warmup must lie in [0, 1)", "keep_checkpoints must be at least 1")

    def test_collects_every_violation(self):
        """Multiple problems are reported together."""
        cfg = AdversarialConfig(lambda1=-1.0, alpha=1.5, tau=2.0, batch_size=7)
        result = validate_config(cfg)
        assert len(result.violations) == 4

    def test_xception_pins_dimensions(self):
        """The Xception generator needs 2048-d features and 299x299 input."""
        cfg = AdversarialConfig(generator=GeneratorKind.XCEPTION_2048, feature_dim=1024, image_size=32)
        result = validate_config(cfg)
        assert "generator=xception_2048 requires feature_dim=2048" in result.violations
        assert "generator=xception_2048 requires image_size=299" in result.violations

    def test_require_valid_raises_with_violations(self):
        """require_valid raises ConfigError carrying the list."""
        with pytest.raises(ConfigError) as exc_info:
            AdversarialConfig(batch_size=3).require_valid()
        assert "batch_size must be even" in exc_info.value.violations
        assert exc_info.value.exit_code == 1


class TestConfigSerialization:
    """JSON files and the config hash."""

    def test_json_round_trip(self):
        """to_json/from_json reproduce the same config."""
        cfg = AdversarialConfig(identity_mode=IdentityMode.OFF, forgery_mode=ForgeryMode.OFF, tau=0.3)
        assert AdversarialConfig.from_json(cfg.to_json()) == cfg

    def test_enums_serialize_as_strings(self):
        """Enum fields appear as their string values."""
        data = json.loads(AdversarialConfig().to_json())
        assert data["identity_mode"] == "similarity"
        assert data["generator"] == "toy_cnn"

    def test_unknown_key_rejected(self):
        """A typo in a config file is an error, not silently ignored."""
        with pytest.raises(ConfigError, match="lamda1"):
            AdversarialConfig.from_dict({"lamda1": 0.5})

    def test_bad_enum_value_is_config_error(self):
        """An unknown identity mode is reported as a config problem."""
        with pytest.raises(ConfigError):
            AdversarialConfig.from_dict({"identity_mode": "telepathy"})

    def test_digest_tracks_content(self):
        """Equal configs hash equally; any change alters the hash."""
        a = AdversarialConfig()
        assert a.digest() == AdversarialConfig().digest()
        assert a.digest() != a.replace(seed=1).digest()

    def test_smoke_fixture_loads(self):
        """The smoke config fixture is valid."""
        cfg = AdversarialConfig.from_dict(load_fixture("config_smoke.json"))
        assert cfg.require_valid() is cfg
        assert cfg.embedding_dim == 16

    def test_save_and_load(self, tmp_path):
        """save/load through a file."""
        cfg = AdversarialConfig(seed=11)
        cfg.save(tmp_path / "c.json")
        assert AdversarialConfig.load(tmp_path / "c.json") == cfg

    def test_missing_file(self, tmp_path):
        """A missing config file is a ConfigError naming the path."""
        with pytest.raises(ConfigError, match="nope.json"):
            AdversarialConfig.load(tmp_path / "nope.json")


class TestSampleRecord:
    """Record-level invariants."""

    def test_real_with_method_rejected(self):
        """REAL records never carry a method label."""
        with pytest.raises(DataError, match="a.png"):
            SampleRecord("a.png", BinaryLabel.REAL, 1, 0, "v", Split.TRAIN)

    def test_negative_label_rejected(self):
        """Labels are nonnegative integers."""
        with pytest.raises(DataError):
            SampleRecord("a.png", BinaryLabel.FAKE, -1, 0, "v", Split.TRAIN)

    def test_strings_coerced_to_enums(self):
        """String labels become enum members."""
        r = SampleRecord("a.png", "fake", 2, None, "v", "test")
        assert r.binary_label is BinaryLabel.FAKE
        assert r.split is Split.TEST
        assert r.is_fake

    def test_dict_round_trip_with_face_box(self):
        """face_box survives to_dict/from_dict."""
        r = SampleRecord("a.png", BinaryLabel.REAL, None, 3, "v", Split.VAL, (1, 2, 30, 40))
        assert SampleRecord.from_dict(r.to_dict()) == r

    def test_missing_key(self):
        """Every required key must be present."""
        with pytest.raises(DataError, match="video_id"):
            SampleRecord.from_dict({"image_path": "a", "binary_label": "real", "method_label": None,
                                    "identity_label": None, "split": "train"})

    def test_errors_share_one_base(self):
        """Library errors derive from AdvForensicsError."""
        assert issubclass(DataError, AdvForensicsError)
        assert issubclass(ConfigError, AdvForensicsError)



class TestFeatureBatch:
    """Generator output paired with its labels."""

    def _batch(self, features, n_ids=3):
        return FeatureBatch(
            features=features,
            binary_labels=torch.tensor([0, 1, 1]),
            method_labels=(None, 0, 1),
            identity_labels=(2, 2, 0),
            sample_ids=tuple(f"s{i}" for i in range(n_ids)),
        )

    def test_fake_mask(self):
        """FAKE rows are the ones with binary label 1."""
        fb = self._batch(torch.zeros(3, 4))
        assert len(fb) == 3
        assert fb.fake_mask.tolist() == [False, True, True]

    def test_length_mismatch(self):
        """Every per-sample array must match the feature rows."""
        with pytest.raises(ContractViolation, match="sample_ids"):
            self._batch(torch.zeros(3, 4), n_ids=2)

    def test_infinite_row(self):
        """Inf in any feature row is rejected."""
        features = torch.zeros(3, 4)
        features[1, 2] = float("inf")
        with pytest.raises(ContractViolation, match="non-finite"):
            self._batch(features)

class TestSeeds:
    """Per-component seed derivation."""

    def test_derive_seed_is_stable(self):
        """Same inputs give the same seed."""
        assert derive_seed(0, "sampler") == derive_seed(0, "sampler")

    def test_components_are_independent(self):
        """Different components and seeds give different streams."""
        seeds = {derive_seed(s, c) for s in range(3) for c in ("sampler", "init", "kmeans")}
        assert len(seeds) == 9

    def test_seed_is_63_bit(self):
        """Derived seeds fit a signed 64-bit integer."""
        assert 0 <= derive_seed(123, "probe") < 2**63

    def test_component_rng_reproducible(self):
        """Two generators for the same component draw the same numbers."""
        a = component_rng(4, "calibration").standard_normal(5)
        b = component_rng(4, "calibration").standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_pair_count(self):
        """M choose 2."""
        assert pair_count(64) == 2016
        assert pair_count(2) == 1
        assert pair_count(1) == 0
