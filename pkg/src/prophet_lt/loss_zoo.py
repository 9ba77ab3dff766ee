"""Classification losses for imbalanced data and the feature-matching distillation loss.

Every batch reduction is a mean. All functions take logits of shape ``(B, C)``
and integer labels of shape ``(B,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

LOSS_KINDS = ("ce", "focal", "class_balanced", "balanced_softmax")


@dataclass(frozen=True)
class LossSpec:
    """Which classification loss to use.

    ``class_counts`` is required for ``class_balanced`` and
    ``balanced_softmax``. ``cb_base`` picks the loss that the class-balanced
    weights multiply (``ce`` or ``focal``, the latter using ``gamma``).
    """

    kind: str = "ce"
    gamma: float = 1.0
    beta: float = 0.999
    class_counts: tuple | None = None
    cb_base: str = "ce"

    def __post_init__(self):
        if self.class_counts is not None:
            object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.gamma >= 0:
            raise ValidationError("gamma must be >= 0")
        if not 0 <= self.beta < 1:
            raise ValidationError("beta must lie in [0, 1)")
        if self.cb_base not in ("ce", "focal"):
            raise ValidationError("cb_base must be 'ce' or 'focal'")
        if self.kind in ("class_balanced", "balanced_softmax"):
            if self.class_counts is None:
                raise ValidationError(f"{self.kind} loss needs class_counts")
            if min(self.class_counts) < 1:
                raise ValidationError("class_counts must all be >= 1")

    def with_counts(self, counts) -> "LossSpec":
        return LossSpec(self.kind, self.gamma, self.beta, tuple(int(c) for c in counts), self.cb_base)

    @property
    def label(self) -> str:
        return loss_label(self.kind, self.gamma, self.beta)


def loss_label(kind: str, gamma: float = 1.0, beta: float = 0.999) -> str:
    """Row label used in comparison tables."""
    if kind == "focal":
        return f"Focal (gamma={gamma:g})"
    if kind == "class_balanced":
        return f"Class-Balanced (beta={beta:g})"
    return {"ce": "CE", "balanced_softmax": "Balanced Softmax"}[kind]


def _check(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        raise ValidationError(f"expected (B, C) logits and (B,) labels, got {tuple(logits.shape)} and {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def _nll_per_sample(logits, labels):
    return -F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)


def ce_loss(logits, labels):
    labels = _check(logits, labels)
    return _nll_per_sample(logits, labels).mean()


def _focal_per_sample(logits, labels, gamma):
    logp = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    if gamma == 0:
        return -logp
    return -((1.0 - logp.exp()) ** gamma) * logp


def focal_loss(logits, labels, gamma: float):
    """Mean of ``-(1 - p_y) ** gamma * log p_y``; gamma = 0 is plain cross-entropy."""
    if not gamma >= 0:
        raise ValidationError("gamma must be >= 0")
    labels = _check(logits, labels)
    return _focal_per_sample(logits, labels, gamma).mean()


def class_balanced_weights(counts, beta: float, normalize: bool = True) -> np.ndarray:
    """Inverse effective-number weights ``(1 - beta) / (1 - beta ** n)``, scaled to mean 1 by default."""
    counts = np.asarray(counts, dtype=np.float64)
    if beta == 1:
        raise ValidationError("beta = 1 makes the effective number degenerate")
    if not 0 <= beta < 1:
        raise ValidationError("beta must lie in [0, 1)")
    if counts.size == 0 or counts.min() < 1:
        raise ValidationError("counts must all be >= 1")
    w = (1.0 - beta) / (1.0 - np.power(beta, counts))
    if normalize:
        w = w * (len(w) / w.sum())
    return w


def class_balanced_loss(logits, labels, counts, beta: float, base: str = "ce", gamma: float = 1.0):
    labels = _check(logits, labels)
    if len(counts) != logits.shape[1]:
        raise ValidationError(f"got {len(counts)} class counts for {logits.shape[1]} classes")
    w = torch.as_tensor(class_balanced_weights(counts, beta), dtype=logits.dtype, device=logits.device)
    per = _focal_per_sample(logits, labels, gamma) if base == "focal" else _nll_per_sample(logits, labels)
    return (w[labels] * per).mean()


def balanced_softmax_loss(logits, labels, counts):
    """Cross-entropy on logits shifted by ``log n_j``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size != logits.shape[1]:
        raise ValidationError(f"got {counts.size} class counts for {logits.shape[1]} classes")
    if counts.min() <= 0:
        raise ValidationError("counts must all be positive")
    shift = torch.as_tensor(np.log(counts), dtype=logits.dtype, device=logits.device)
    return ce_loss(logits + shift, labels)


def classification_loss(logits, labels, spec: LossSpec):
    if spec.kind == "ce":
        return ce_loss(logits, labels)
    if spec.kind == "focal":
        return focal_loss(logits, labels, spec.gamma)
    if spec.kind == "class_balanced":
        return class_balanced_loss(logits, labels, spec.class_counts, spec.beta, spec.cb_base, spec.gamma)
    return balanced_softmax_loss(logits, labels, spec.class_counts)


def feature_distill_loss(v, v_hat):
    if v.shape != v_hat.shape:
        raise ValidationError(f"feature shapes differ: {tuple(v.shape)} vs {tuple(v_hat.shape)}")
    return ((v - v_hat) ** 2).mean()


def student_loss(logits, labels, spec: LossSpec, v, v_hat, alpha: float = 1.0):
    """Classification loss plus ``alpha`` times the feature MSE."""
    if not (alpha >= 0 and math.isfinite(alpha)):
        raise ValidationError("alpha must be finite and >= 0")
    return classification_loss(logits, labels, spec) + alpha * feature_distill_loss(v, v_hat)
