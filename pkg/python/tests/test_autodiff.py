"""Gradient reversal, the lambda ramp and the loss functions."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

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
from advforensics.core import AdversarialConfig, ForgeryMode, IdentityMode
from advforensics.errors import ConfigError, ContractViolation, DataError


def _log_softmax_oracle(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


class TestRamp:
    """Adversarial weight schedule."""

    def test_starts_at_zero(self):
        """lambda(0) is exactly zero."""
        assert ramp_lambda(RampState(0, 1000)) == 0.0

    def test_end_value(self):
        """lambda(total) with gamma=10."""
        assert ramp_lambda(RampState(1000, 1000, 10)) == pytest.approx(0.9999092, abs=1e-6)

    def test_midpoint_value(self):
        """lambda(total/2) with gamma=10."""
        assert ramp_lambda(RampState(500, 1000, 10)) == pytest.approx(0.9866143, abs=1e-6)

    def test_strictly_increasing_sweep(self):
        """1000-point sweep rises strictly and stays below one."""
        values = [ramp_lambda(RampState(i, 999, 10)) for i in range(1000)]
        assert all(b > a for a, b in zip(values, values[1:]))
        assert 0.0 <= values[0] and values[-1] < 1.0

    def test_zero_total_is_config_error(self):
        """total_iters must be positive."""
        with pytest.raises(ConfigError):
            RampState(0, 0)

    def test_current_beyond_total_rejected(self):
        """current_iters may not exceed total_iters."""
        with pytest.raises(ConfigError):
            RampState(11, 10)

    def test_advance_saturates(self):
        """advance() never runs past the end."""
        state = RampState(9, 10).advance().advance()
        assert state.current_iters == 10
        assert state.progress == 1.0


class TestGradientReversal:
    """Identity forward, negated and scaled backward."""

    def test_forward_is_identity(self):
        """Forward returns x exactly."""
        x = torch.randn(4, 3)
        assert torch.equal(gradient_reversal(x, 0.7), x)

    def test_lambda_zero_blocks_gradient(self):
        """lambda=0 gives a zero gradient."""
        x = torch.tensor([1.0, 2.0], requires_grad=True)
        gradient_reversal(x, 0.0).pow(2).sum().backward()
        assert torch.equal(x.grad, torch.zeros(2))

    def test_square_example(self):
        """sum(x^2) after the node at (1, 2) with lambda=1 gives (-2, -4)."""
        x = torch.tensor([1.0, 2.0], requires_grad=True)
        gradient_reversal(x, 1.0).pow(2).sum().backward()
        assert torch.allclose(x.grad, torch.tensor([-2.0, -4.0]))

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_matches_negated_finite_differences(self, lam):
        """Two-layer net: grad through the node equals -lambda times the finite-difference grad."""
        gen = torch.Generator().manual_seed(17)
        w1 = torch.randn(6, 4, generator=gen, dtype=torch.float64)
        w2 = torch.randn(3, 6, generator=gen, dtype=torch.float64)

        def downstream(h):
            return torch.tanh(h @ w2.T).pow(2).sum()

        for _ in range(10):
            x = torch.randn(5, 4, generator=gen, dtype=torch.float64)
            h = (x @ w1.T).detach().requires_grad_(True)
            downstream(gradient_reversal(h, lam)).backward()

            eps = 1e-6
            fd = torch.zeros_like(h)
            with torch.no_grad():
                for idx in np.ndindex(*h.shape):
                    plus, minus = h.clone(), h.clone()
                    plus[idx] += eps
                    minus[idx] -= eps
                    fd[idx] = (downstream(plus) - downstream(minus)) / (2 * eps)
            torch.testing.assert_close(h.grad, -lam * fd, rtol=1e-4, atol=1e-8)

    def test_module_lambda_is_mutable(self):
        """The module reads its current lambda on every call."""
        grl = GradientReversal(0.0)
        grl.lam = 2.0
        x = torch.ones(3, requires_grad=True)
        grl(x).sum().backward()
        assert torch.equal(x.grad, torch.full((3,), -2.0))


class TestAdversarialCrossEntropy:
    """Mean cross-entropy losses of the two discriminators."""

    def test_uniform_logits(self):
        """Uniform logits over 4 methods cost ln 4."""
        loss = forgery_adversarial_loss(torch.zeros(1, 4), torch.tensor([2]))
        assert loss.item() == pytest.approx(1.386294, abs=1e-6)

    def test_matches_log_softmax_oracle(self, rng):
        """100 random instances agree with a direct log-softmax evaluation."""
        for _ in range(100):
            f, n = int(rng.integers(1, 9)), int(rng.integers(2, 7))
            logits = rng.normal(scale=3.0, size=(f, n))
            labels = rng.integers(0, n, size=f)
            got = forgery_adversarial_loss(torch.tensor(logits), torch.tensor(labels))
            assert got.item() == pytest.approx(_log_softmax_oracle(logits, labels), abs=1e-6)
            got_id = identity_hard_label_loss(torch.tensor(logits), labels.tolist())
            assert got_id.item() == pytest.approx(_log_softmax_oracle(logits, labels), abs=1e-6)

    def test_mean_of_two(self):
        """Two samples average their losses."""
        logits = torch.tensor([[2.0, 0.0], [0.0, 1.0]])
        a = forgery_adversarial_loss(logits[:1], torch.tensor([0])).item()
        b = forgery_adversarial_loss(logits[1:], torch.tensor([0])).item()
        both = forgery_adversarial_loss(logits, torch.tensor([0, 0])).item()
        assert both == pytest.approx((a + b) / 2)

    def test_empty_batch_sentinel(self):
        """No fakes gives a zero that still backpropagates."""
        logits = torch.zeros(0, 4, requires_grad=True)
        loss = forgery_adversarial_loss(logits, torch.zeros(0, dtype=torch.long))
        assert loss.item() == 0.0
        loss.backward()

    def test_label_out_of_range(self):
        """Method labels must index a logit column."""
        with pytest.raises(DataError):
            forgery_adversarial_loss(torch.zeros(2, 3), torch.tensor([0, 3]))

    def test_hard_label_two_identities(self):
        """Even odds over 2 identities cost ln 2."""
        loss = identity_hard_label_loss(torch.zeros(1, 2), [0])
        assert loss.item() == pytest.approx(0.693147, abs=1e-6)

    def test_hard_label_missing_identity_names_sample(self):
        """An absent label in hard-label mode names the sample."""
        with pytest.raises(DataError, match="frame_7.png"):
            identity_hard_label_loss(torch.zeros(2, 3), [0, None], ["frame_6.png", "frame_7.png"])

    def test_hard_label_permutation_invariant(self, rng):
        """Reordering samples leaves the loss unchanged."""
        logits = torch.tensor(rng.normal(size=(6, 4)))
        labels = [0, 1, 2, 3, 0, 1]
        perm = [5, 3, 1, 0, 2, 4]
        a = identity_hard_label_loss(logits, labels)
        b = identity_hard_label_loss(logits[perm], [labels[i] for i in perm])
        assert a.item() == pytest.approx(b.item(), abs=1e-12)


class TestFocalLoss:
    """Binary focal loss and the pairwise sum."""

    def test_positive_case(self):
        """y=1, y_hat=0.5."""
        assert focal_loss(1, 0.5, 0.25, 2).item() == pytest.approx(0.0433217, abs=1e-6)

    def test_negative_case(self):
        """y=0, y_hat=0.5."""
        assert focal_loss(0, 0.5, 0.25, 2).item() == pytest.approx(0.1299651, abs=1e-6)

    def test_confident_correct_is_near_zero(self):
        """y=1 with y_hat close to one costs almost nothing."""
        assert focal_loss(1, 1.0 - 1e-9).item() < 1e-10

    def test_clamped_at_extremes(self):
        """y_hat of exactly 0 or 1 stays finite."""
        assert math.isfinite(focal_loss(1, 0.0).item())
        assert math.isfinite(focal_loss(0, 1.0).item())

    def test_half_bce_anchor(self, rng):
        """alpha=0.5, beta=0 is half the binary cross-entropy."""
        p = torch.tensor(rng.uniform(0.01, 0.99, size=50))
        y = torch.tensor(rng.integers(0, 2, size=50), dtype=torch.float64)
        got = focal_loss(y, p, alpha=0.5, beta=0.0)
        expected = 0.5 * F.binary_cross_entropy(p, y, reduction="none")
        torch.testing.assert_close(got, expected, rtol=1e-9, atol=1e-12)

    def test_single_pair_sum(self):
        """One pair reduces to one focal term."""
        loss = identity_similarity_loss(torch.tensor([0.5]), torch.tensor([1.0]))
        assert loss.item() == pytest.approx(0.0433217, abs=1e-6)

    def test_sum_over_2016_pairs(self):
        """The pairwise loss is a sum unless normalized."""
        preds = torch.full((2016,), 0.5, dtype=torch.float64)
        labels = torch.zeros(2016, dtype=torch.float64)
        total = identity_similarity_loss(preds, labels)
        mean = identity_similarity_loss(preds, labels, normalize=True)
        assert total.item() == pytest.approx(2016 * 0.1299651, rel=1e-6)
        assert mean.item() == pytest.approx(0.1299651, abs=1e-6)

    def test_perfect_pairs_near_zero(self):
        """Correct, confident pair predictions cost nearly nothing."""
        labels = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        preds = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        assert identity_similarity_loss(preds, labels).item() < 1e-6

    def test_length_mismatch(self):
        """Predictions and labels must align pair for pair."""
        with pytest.raises(ContractViolation):
            identity_similarity_loss(torch.zeros(3), torch.zeros(4))


class TestTotalLoss:
    """Weighted composition with ablation switches."""

    def test_default_weights(self):
        """1 + 0.8 + 5."""
        assert total_loss(1.0, 1.0, 1.0, AdversarialConfig()) == pytest.approx(6.8)

    def test_zero_weights_reduce_to_classifier(self):
        """lambda1 = lambda2 = 0 leaves l_cls."""
        cfg = AdversarialConfig(lambda1=0.0, lambda2=0.0)
        assert total_loss(1.3, 2.0, 3.0, cfg) == pytest.approx(1.3)

    def test_both_off_is_bitwise_l_cls(self):
        """Both modes OFF return l_cls itself."""
        cfg = AdversarialConfig(forgery_mode=ForgeryMode.OFF, identity_mode=IdentityMode.OFF)
        l_cls = torch.tensor(0.123456789)
        assert torch.equal(total_loss(l_cls, torch.tensor(9.0), torch.tensor(9.0), cfg), l_cls)

    def test_linear_in_forgery_term(self):
        """Doubling l_f adds lambda1 * l_f."""
        cfg = AdversarialConfig()
        a = total_loss(1.0, 2.0, 0.5, cfg)
        b = total_loss(1.0, 4.0, 0.5, cfg)
        assert b - a == pytest.approx(cfg.lambda1 * 2.0)

    def test_identity_off_drops_term(self):
        """identity_mode=OFF removes only the identity term."""
        cfg = AdversarialConfig(identity_mode=IdentityMode.OFF)
        assert total_loss(1.0, 1.0, 100.0, cfg) == pytest.approx(1.8)
