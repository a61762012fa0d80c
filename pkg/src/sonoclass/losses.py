"""Imbalance-aware classification losses with analytic logit gradients.

Five variants over batched logits (B x K) and integer labels:

* plain softmax cross-entropy,
* cross-entropy against label-smoothed targets,
* focal loss  -alpha_y * (1 - p_y)^gamma * log p_y,
* margin loss that subtracts a per-class margin C * n_j^(-1/4) from the
  true-class logit before a scaled softmax (margins grow as class counts
  shrink), and
* the additive combination of the focal and margin losses.

Each returns the batch-mean loss and d(loss)/d(logits), so they plug into
the tape via :func:`sonoclass.autodiff.external_grad_op`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, external_grad_op

__all__ = [
    "LossError",
    "LossOutput",
    "LossConfig",
    "LOSS_KINDS",
    "cross_entropy",
    "cross_entropy_label_smoothing",
    "focal_loss",
    "ldam_margins",
    "ldam_loss",
    "ldam_focal_loss",
    "make_loss",
    "attach_loss",
]

LOSS_KINDS = ("ce", "ce_ls", "focal", "ldam", "ldam_focal")


class LossError(ValueError):
    """Raised for invalid loss parameters or malformed batches."""


@dataclass(frozen=True)
class LossOutput:
    loss: float
    grad_logits: np.ndarray  # (B, K)


def _check_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise LossError(f"logits must be B x K, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise LossError(
            f"labels shape {labels.shape} does not match batch size {logits.shape[0]}"
        )
    if not np.all(np.isfinite(logits)):
        raise LossError("logits contain non-finite values")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LossError(
            f"labels must lie in 0..{logits.shape[1] - 1}, got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return logits, labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> LossOutput:
    """Mean of -log softmax(logits)[label]; grad is (softmax - onehot) / B."""
    logits, labels = _check_batch(logits, labels)
    b, k = logits.shape
    log_p = _log_softmax(logits)
    rows = np.arange(b)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return LossOutput(loss, grad / b)


def cross_entropy_label_smoothing(logits, labels, epsilon: float) -> LossOutput:
    """Cross-entropy against (1-eps) * onehot + eps / K targets."""
    if not 0.0 <= epsilon < 1.0:
        raise LossError(f"label-smoothing epsilon must lie in [0, 1), got {epsilon}")
    logits, labels = _check_batch(logits, labels)
    b, k = logits.shape
    log_p = _log_softmax(logits)
    rows = np.arange(b)
    targets = np.full((b, k), epsilon / k)
    targets[rows, labels] += 1.0 - epsilon
    loss = float(-(targets * log_p).sum(axis=1).mean())
    grad = (np.exp(log_p) - targets) / b
    return LossOutput(loss, grad)


def focal_loss(logits, labels, gamma: float = 2.0, alpha=None) -> LossOutput:
    """Mean of -alpha_y * (1 - p_y)^gamma * log p_y.

    ``alpha`` is an optional per-class weight vector (defaults to ones);
    gamma = 0 with unit alpha reduces exactly to plain cross-entropy.
    """
    if gamma < 0:
        raise LossError(f"focal gamma must be nonnegative, got {gamma}")
    logits, labels = _check_batch(logits, labels)
    b, k = logits.shape
    if alpha is None:
        alpha_y = np.ones(b)
    else:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (k,):
            raise LossError(f"alpha must have one weight per class, got {alpha.shape}")
        if np.any(alpha <= 0):
            raise LossError("alpha weights must be positive")
        alpha_y = alpha[labels]

    log_p = _log_softmax(logits)
    p = np.exp(log_p)
    rows = np.arange(b)
    p_y = p[rows, labels]
    log_p_y = log_p[rows, labels]
    one_minus = np.maximum(1.0 - p_y, 1e-300)
    focal_weight = one_minus**gamma
    loss = float((-alpha_y * focal_weight * log_p_y).mean())

    # d/dz_j = -alpha_y * (delta_yj - p_j)
    #          * ((1-p_y)^gamma - gamma * p_y * (1-p_y)^(gamma-1) * log p_y)
    if gamma == 0.0:
        scalar = focal_weight
    else:
        scalar = focal_weight - gamma * p_y * one_minus ** (gamma - 1.0) * log_p_y
    delta = np.zeros((b, k))
    delta[rows, labels] = 1.0
    grad = -(alpha_y * scalar)[:, None] * (delta - p) / b
    return LossOutput(loss, grad)


def ldam_margins(class_counts, max_margin: float) -> np.ndarray:
    """Per-class margins C * n_j^(-1/4), scaled so the largest equals
    ``max_margin``; rarer classes receive larger margins."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise LossError("class counts must be a nonempty vector")
    if np.any(counts < 1):
        raise LossError("every class count must be >= 1")
    if max_margin < 0:
        raise LossError(f"max_margin must be nonnegative, got {max_margin}")
    raw = counts ** (-0.25)
    return raw * (max_margin / raw.max())


def ldam_loss(
    logits, labels, class_counts, max_margin: float = 0.5, scale: float = 30.0
) -> LossOutput:
    """Cross-entropy over scale * (logits - margin_y * onehot_y)."""
    if scale <= 0:
        raise LossError(f"scale must be positive, got {scale}")
    logits, labels = _check_batch(logits, labels)
    margins = ldam_margins(class_counts, max_margin)
    if margins.shape[0] != logits.shape[1]:
        raise LossError(
            f"{margins.shape[0]} class counts do not match {logits.shape[1]} logits"
        )
    b = logits.shape[0]
    rows = np.arange(b)
    shifted = logits.copy()
    shifted[rows, labels] -= margins[labels]
    inner = cross_entropy(scale * shifted, labels)
    return LossOutput(inner.loss, scale * inner.grad_logits)


def ldam_focal_loss(
    logits,
    labels,
    class_counts,
    gamma: float = 2.0,
    alpha=None,
    max_margin: float = 0.5,
    scale: float = 30.0,
    mix_alpha: float = 1.0,
    mix_beta: float = 1.0,
) -> LossOutput:
    """Weighted sum mix_alpha * focal + mix_beta * margin loss."""
    if mix_alpha < 0 or mix_beta < 0:
        raise LossError("mix weights must be nonnegative")
    if mix_alpha == 0 and mix_beta == 0:
        raise LossError("at least one mix weight must be positive")
    total = 0.0
    grad = None
    if mix_alpha:
        part = focal_loss(logits, labels, gamma=gamma, alpha=alpha)
        total += mix_alpha * part.loss
        grad = mix_alpha * part.grad_logits
    if mix_beta:
        part = ldam_loss(logits, labels, class_counts, max_margin=max_margin, scale=scale)
        total += mix_beta * part.loss
        grad = mix_beta * part.grad_logits if grad is None else grad + mix_beta * part.grad_logits
    return LossOutput(total, grad)


@dataclass(frozen=True)
class LossConfig:
    """Loss selection plus every knob the five variants understand."""

    kind: str = "ce"
    ls_epsilon: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: tuple[float, ...] | None = None
    ldam_max_margin: float = 0.5
    ldam_scale: float = 30.0
    mix_alpha: float = 1.0
    mix_beta: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}; known: {LOSS_KINDS}")
        if not 0.0 <= self.ls_epsilon < 1.0:
            raise LossError("ls_epsilon must lie in [0, 1)")
        if self.focal_gamma < 0:
            raise LossError("focal_gamma must be nonnegative")
        if self.ldam_max_margin <= 0 and self.kind in ("ldam", "ldam_focal"):
            raise LossError("ldam_max_margin must be positive")
        if self.ldam_scale <= 0:
            raise LossError("ldam_scale must be positive")


def make_loss(config: LossConfig, class_counts=None):
    """Bind a config (plus class counts for the margin losses) into a
    ``fn(logits, labels) -> LossOutput`` callable."""
    if config.kind in ("ldam", "ldam_focal") and class_counts is None:
        raise LossError(f"loss kind {config.kind!r} requires class counts")
    alpha = None if config.focal_alpha is None else np.asarray(config.focal_alpha)

    if config.kind == "ce":
        return lambda logits, labels: cross_entropy(logits, labels)
    if config.kind == "ce_ls":
        return lambda logits, labels: cross_entropy_label_smoothing(
            logits, labels, config.ls_epsilon
        )
    if config.kind == "focal":
        return lambda logits, labels: focal_loss(
            logits, labels, gamma=config.focal_gamma, alpha=alpha
        )
    if config.kind == "ldam":
        return lambda logits, labels: ldam_loss(
            logits,
            labels,
            class_counts,
            max_margin=config.ldam_max_margin,
            scale=config.ldam_scale,
        )
    return lambda logits, labels: ldam_focal_loss(
        logits,
        labels,
        class_counts,
        gamma=config.focal_gamma,
        alpha=alpha,
        max_margin=config.ldam_max_margin,
        scale=config.ldam_scale,
        mix_alpha=config.mix_alpha,
        mix_beta=config.mix_beta,
    )


def attach_loss(logits: Tensor, loss_fn, labels) -> tuple[Tensor, LossOutput]:
    """Evaluate ``loss_fn`` on the logits and record the scalar on the tape
    so ``backward`` propagates the analytic logit gradient."""
    out = loss_fn(logits.data, labels)
    scalar = external_grad_op(logits, out.loss, out.grad_logits)
    return scalar, out
