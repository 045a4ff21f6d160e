"""Generator, heads, pair machinery and checkpoints."""

import pytest
import torch
import torch.nn.functional as F

from advforensics.autodiff import identity_hard_label_loss, identity_similarity_loss
from advforensics.core import AdversarialConfig, GeneratorKind, IdentityMode
from advforensics.errors import ConfigError, ContractViolation, ShapeError
from advforensics.networks import (
    GeneratorSpec,
    Head,
    HeadKind,
    HeadSpec,
    build_generator,
    build_model,
    forward_generator,
    forward_identity_sim_head,
    link_checkpoint,
    load_checkpoint,
    pairwise_feature_distance,
    save_checkpoint,
)


def _cfg(**kw):
    base = dict(generator_dim=16, image_size=16, n_methods=3, seed=1)
    base.update(kw)
    return AdversarialConfig(**base)


class TestGenerator:
    """Z = G(X) shape contract."""

    def test_toy_cnn_output_shape(self):
        """[M, 3, S, S] maps to [M, output_dim]."""
        spec = GeneratorSpec(GeneratorKind.TOY_CNN, output_dim=24, input_size=16)
        z = forward_generator(torch.randn(5, 3, 16, 16), build_generator(spec), spec)
        assert z.shape == (5, 24)

    def test_wrong_input_size(self):
        """A mismatched resolution is a shape error naming both sides."""
        spec = GeneratorSpec(GeneratorKind.TOY_CNN, output_dim=8, input_size=16)
        with pytest.raises(ShapeError, match="generator input"):
            forward_generator(torch.randn(2, 3, 32, 32), build_generator(spec), spec)

    def test_channels_last_rejected(self):
        """Images must be channels-first."""
        spec = GeneratorSpec(GeneratorKind.TOY_CNN, output_dim=8, input_size=16)
        with pytest.raises(ShapeError):
            forward_generator(torch.randn(2, 16, 16, 3), build_generator(spec), spec)

    def test_xception_spec_requires_2048(self):
        """The Xception spec fixes its feature width."""
        with pytest.raises(ConfigError):
            GeneratorSpec(GeneratorKind.XCEPTION_2048, output_dim=512, input_size=299)

    def test_pretrained_needs_local_weights(self):
        """Nothing is downloaded: pretrained without a path is rejected."""
        with pytest.raises(ConfigError):
            GeneratorSpec(GeneratorKind.TOY_CNN, pretrained=True)


class TestHeads:
    """Head specs and outputs."""

    def test_discriminator_hidden_dims_enforced(self):
        """Discriminators are 512-512 MLPs."""
        with pytest.raises(ConfigError):
            HeadSpec(HeadKind.FORGERY_DISC, 4, (256,))

    def test_binary_head_has_two_outputs(self):
        """The classifier emits two logits."""
        with pytest.raises(ConfigError):
            HeadSpec(HeadKind.BINARY_CLS, 3)

    def test_similarity_head_in_unit_interval(self):
        """Sigmoid outputs lie strictly inside (0, 1)."""
        head = Head(HeadSpec.identity_sim(), 8)
        out = forward_identity_sim_head(head, torch.randn(10, 8) * 50)
        assert out.shape == (10,)
        assert bool(((out >= 0) & (out <= 1)).all())

    def test_sim_head_wrapper_rejects_other_heads(self):
        """Only the similarity head takes pair inputs."""
        with pytest.raises(ContractViolation):
            forward_identity_sim_head(Head(HeadSpec.forgery(3), 8), torch.randn(2, 8))


class TestPairwiseDistance:
    """Canonical pair enumeration."""

    def test_pair_count_and_order(self):
        """M=4 gives 6 rows ordered (0,1),(0,2),(0,3),(1,2),(1,3),(2,3)."""
        z = torch.tensor([[0.0], [1.0], [3.0], [6.0]])
        d = pairwise_feature_distance(z)
        assert d.shape == (6, 1)
        assert d.squeeze(1).tolist() == [1.0, 9.0, 36.0, 4.0, 25.0, 9.0]

    def test_64_rows(self):
        """M=64 gives 2016 pairs."""
        assert pairwise_feature_distance(torch.randn(64, 5)).shape == (2016, 5)

    def test_elementwise_square(self):
        """Each row is (Z_m - Z_n)^2 per dimension."""
        z = torch.tensor([[1.0, 2.0], [4.0, -2.0]])
        assert pairwise_feature_distance(z).tolist() == [[9.0, 16.0]]

    def test_single_row_rejected(self):
        """Pairs need at least two samples."""
        with pytest.raises(ContractViolation):
            pairwise_feature_distance(torch.randn(1, 3))


class TestAdversarialDetector:
    """Full model wiring."""

    def test_seeded_init_is_reproducible(self):
        """Same seed, same weights."""
        a, b = build_model(_cfg()), build_model(_cfg())
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_identity_head_follows_mode(self):
        """Hard-label mode gets a classifier head, similarity mode a pair head."""
        hard = build_model(_cfg(identity_mode=IdentityMode.HARD_LABEL, n_identities=5))
        sim = build_model(_cfg())
        assert hard.identity_disc.spec.output_dim == 5
        assert sim.identity_disc.spec.head is HeadKind.ID_DISC_SIM

    def test_identity_similarity_output_per_pair(self):
        """Similarity mode yields one probability per pair."""
        model = build_model(_cfg())
        z = model.encode(torch.randn(6, 3, 16, 16))
        assert model.discriminate_identity(z).shape == (15,)

    def test_generator_receives_reversed_forgery_gradient(self):
        """dL_f/dZ through the model is -lambda times the gradient without the node."""
        model = build_model(_cfg())
        model.set_lambda(0.6)
        z = torch.randn(4, 16, requires_grad=True)
        labels = torch.tensor([0, 1, 2, 0])
        F.cross_entropy(model.discriminate_forgery(z), labels).backward()
        with_node = z.grad.clone()

        z2 = z.detach().clone().requires_grad_(True)
        F.cross_entropy(model.forgery_disc(z2), labels).backward()
        torch.testing.assert_close(with_node, -0.6 * z2.grad)

    @pytest.mark.parametrize("path", ["classifier", "identity_hard", "identity_sim"])
    def test_generator_gradient_from_each_loss(self, path):
        """Each enabled loss alone reaches the generator with nonzero gradient."""
        mode = IdentityMode.HARD_LABEL if path == "identity_hard" else IdentityMode.SIMILARITY
        model = build_model(_cfg(identity_mode=mode, n_identities=3))
        model.set_lambda(0.5)
        z = model.encode(torch.randn(6, 3, 16, 16))
        if path == "classifier":
            loss = F.cross_entropy(model.classify(z), torch.tensor([0, 1, 0, 1, 0, 1]))
        elif path == "identity_hard":
            loss = identity_hard_label_loss(model.discriminate_identity(z), [0, 1, 2, 0, 1, 2])
        else:
            same = torch.tensor([1.0, 0, 0, 1, 0] + [0.0] * 10)
            loss = identity_similarity_loss(model.discriminate_identity(z), same)
        loss.backward()
        norm = sum(float(p.grad.pow(2).sum()) for p in model.generator.parameters() if p.grad is not None)
        assert norm > 0

    def test_fake_probability_in_unit_interval(self):
        """softmax column 1."""
        model = build_model(_cfg()).eval()
        p = model.fake_probability(torch.randn(3, 3, 16, 16))
        assert p.shape == (3,)
        assert bool(((p >= 0) & (p <= 1)).all())


class TestCheckpoints:
    """Atomic saves and latest/best aliases."""

    def test_round_trip(self, tmp_path):
        """Weights and extra fields come back unchanged."""
        model = build_model(_cfg())
        path = save_checkpoint(tmp_path / "ckpt-000001.pt", model, None, {"train_state": {"iteration": 1}})
        payload = load_checkpoint(path)
        assert payload["train_state"] == {"iteration": 1}
        restored = build_model(_cfg(seed=2))
        restored.load_state_dict(payload["model"])
        for k, v in model.state_dict().items():
            assert torch.equal(v, restored.state_dict()[k])

    def test_foreign_file_rejected(self, tmp_path):
        """A file without the format tag is not loaded as a checkpoint."""
        torch.save({"weights": 1}, tmp_path / "x.pt")
        with pytest.raises(ConfigError, match="advforensics-ckpt/1"):
            load_checkpoint(tmp_path / "x.pt")

    def test_link_replaces_alias(self, tmp_path):
        """latest.pt follows the newest checkpoint."""
        model = build_model(_cfg())
        first = save_checkpoint(tmp_path / "ckpt-000001.pt", model, None, {"n": 1})
        second = save_checkpoint(tmp_path / "ckpt-000002.pt", model, None, {"n": 2})
        alias = tmp_path / "latest.pt"
        link_checkpoint(first, alias)
        link_checkpoint(second, alias)
        assert load_checkpoint(alias)["n"] == 2
