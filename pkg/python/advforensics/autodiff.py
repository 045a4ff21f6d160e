"""Differentiable pieces layered on top of a plain classifier.

Gradient reversal, the adversarial weight ramp, the adversarial
cross-entropy losses, the pairwise focal loss and total-loss composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .core import AdversarialConfig, ForgeryMode, IdentityMode
from .errors import ConfigError, ContractViolation, DataError

EPS = 1e-7


@dataclass(frozen=True)
class RampState:
    current_iters: int
    total_iters: int
    gamma: float = 10.0

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ConfigError(f"total_iters must be positive, got {self.total_iters}")
        if not 0 <= self.current_iters <= self.total_iters:
            raise ConfigError(
                f"current_iters={self.current_iters} outside [0, {self.total_iters}]"
            )
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")

    @property
    def progress(self) -> float:
        return self.current_iters / self.total_iters

    def advance(self) -> "RampState":
        return RampState(min(self.current_iters + 1, self.total_iters), self.total_iters, self.gamma)


def ramp_lambda(state: RampState) -> float:
    """2 / (1 + exp(-gamma * p)) - 1, rising from 0 towards 1."""
    return 2.0 / (1.0 + math.exp(-state.gamma * state.progress)) - 1.0


class GradReverse(torch.autograd.Function):
    """Identity forward; backward multiplies the incoming gradient by -lambda."""

    @staticmethod
    def forward(ctx, x, constant):
        ctx.constant = constant
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.constant, None


def gradient_reversal(x: torch.Tensor, lam: float) -> torch.Tensor:
    return GradReverse.apply(x, float(lam))


class GradientReversal(torch.nn.Module):
    """Module wrapper holding a mutable lambda, set once per training step."""

    def __init__(self, lam: float = 0.0):
        super().__init__()
        self.lam = float(lam)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gradient_reversal(x, self.lam)

    def extra_repr(self) -> str:
        return f"lam={self.lam}"


def _zero_like(logits: torch.Tensor) -> torch.Tensor:
    # keeps the graph connected so backward() on a total is still valid
    return logits.sum() * 0.0


def forgery_adversarial_loss(logits: torch.Tensor, method_labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the forgery-method head over fake samples.

    An empty batch returns a zero sentinel that contributes nothing.
    """
    if logits.shape[0] == 0:
        return _zero_like(logits)
    if logits.shape[0] != method_labels.shape[0]:
        raise ContractViolation(
            f"{logits.shape[0]} logit rows but {method_labels.shape[0]} method labels"
        )
    n = logits.shape[1]
    if method_labels.numel() and (method_labels.min() < 0 or method_labels.max() >= n):
        raise DataError(f"method labels must lie in [0, {n})")
    return F.cross_entropy(logits, method_labels.long(), reduction="mean")


def identity_hard_label_loss(
    logits: torch.Tensor,
    identity_labels: Sequence[Optional[int]],
    sample_ids: Optional[Sequence[str]] = None,
) -> torch.Tensor:
    """Mean cross-entropy of the identity head over every sample in the batch."""
    labels = list(identity_labels)
    if len(labels) != logits.shape[0]:
        raise ContractViolation(f"{logits.shape[0]} logit rows but {len(labels)} identity labels")
    for i, label in enumerate(labels):
        if label is None:
            who = sample_ids[i] if sample_ids is not None else f"index {i}"
            raise DataError(f"sample {who} has no identity label in hard-label mode")
        if not 0 <= label < logits.shape[1]:
            who = sample_ids[i] if sample_ids is not None else f"index {i}"
            raise DataError(f"sample {who} identity label {label} outside [0, {logits.shape[1]})")
    target = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, target, reduction="mean")


Number = Union[float, torch.Tensor]


def focal_loss(y: Number, y_hat: Number, alpha: float = 0.25, beta: float = 2.0) -> torch.Tensor:
    """Elementwise binary focal loss; ``y_hat`` is clamped to [1e-7, 1 - 1e-7]."""
    if not torch.is_tensor(y_hat):
        y_hat = torch.tensor(y_hat, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=y_hat.dtype, device=y_hat.device)
    p = y_hat.clamp(EPS, 1.0 - EPS)
    pos = y * alpha * (1.0 - p).pow(beta) * torch.log(p)
    neg = (1.0 - y) * (1.0 - alpha) * p.pow(beta) * torch.log(1.0 - p)
    return -(pos + neg)


def identity_similarity_loss(
    pair_predictions: torch.Tensor,
    pair_labels: torch.Tensor,
    alpha: float = 0.25,
    beta: float = 2.0,
    normalize: bool = False,
) -> torch.Tensor:
    """Sum of focal terms over all canonical pairs (mean when ``normalize``)."""
    if pair_predictions.shape != pair_labels.shape:
        raise ContractViolation(
            f"pair predictions {tuple(pair_predictions.shape)} vs labels {tuple(pair_labels.shape)}"
        )
    if pair_predictions.numel() == 0:
        return _zero_like(pair_predictions)
    terms = focal_loss(pair_labels.to(pair_predictions.dtype), pair_predictions, alpha, beta)
    return terms.mean() if normalize else terms.sum()


def total_loss(l_cls: Number, l_f: Number, l_id: Number, cfg: AdversarialConfig) -> Number:
    """l_cls + lambda1 * l_f + lambda2 * l_id; OFF modes drop their term."""
    total = l_cls
    if cfg.forgery_mode is ForgeryMode.ON:
        total = total + cfg.lambda1 * l_f
    if cfg.identity_mode is not IdentityMode.OFF:
        total = total + cfg.lambda2 * l_id
    return total
