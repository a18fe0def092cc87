"""Point- and frustum-level supervision and the toy optimizer.

The combined objective is point cross-entropy plus, per backbone stage,
weighted cross-entropy and Lovasz-Softmax on frustum logits against pseudo
labels (the majority class among a frustum's member points, ignore votes
excluded, ties to the smallest class id).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .errors import DataError, NumericError
from .geometry import FrustumIndex
from .nn import Tensor, _node, add, scale, softmax_rows

_EPS_SIMPLEX = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_frustum: float = 1.0
    frustum_ce_w: float = 1.0
    frustum_lovasz_w: float = 1.5

    def __post_init__(self):
        if min(self.lambda_frustum, self.frustum_ce_w, self.frustum_lovasz_w) < 0:
            raise DataError("loss weights must be non-negative")


def frustum_pseudo_labels(labels: np.ndarray, index: FrustumIndex,
                          num_classes: int, ignore_label: int,
                          factor: int = 1) -> np.ndarray:
    """Majority member label per pixel at a stage resolution.

    Points are re-binned by integer division of (v, u) by ``factor``.
    Ignore-labeled points do not vote; empty or all-ignored pixels get the
    ignore label; vote ties go to the smallest class id.
    """
    h = -(-index.height // factor)
    w = -(-index.width // factor)
    votes = np.zeros((h, w, num_classes), dtype=np.int64)
    voting = labels != ignore_label
    if voting.any():
        np.add.at(votes, (index.v[voting] // factor, index.u[voting] // factor,
                          labels[voting]), 1)
    out = np.full((h, w), ignore_label, dtype=np.int64)
    occupied = votes.sum(axis=2) > 0
    out[occupied] = votes.argmax(axis=2)[occupied]
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_label: int) -> Tensor:
    """Mean negative log softmax over non-ignored rows; 0 if all ignored."""
    m, c = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (m,):
        raise DataError(f"targets shape {targets.shape} vs logits {logits.data.shape}")
    bad = (targets != ignore_label) & ((targets < 0) | (targets >= c))
    if bad.any():
        raise DataError(f"target {targets[bad][0]} outside [0, {c}) and not ignore")
    valid = targets != ignore_label
    n_valid = int(valid.sum())

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    if n_valid == 0:
        value = 0.0
    else:
        rows = np.nonzero(valid)[0]
        # log softmax directly: stays finite under saturated logits.
        log_probs = shifted - np.log(e.sum(axis=1, keepdims=True))
        value = float(-log_probs[rows, targets[rows]].mean())

    def backward():
        if logits.requires_grad and n_valid > 0:
            g = float(out.grad)
            rows = np.nonzero(valid)[0]
            grad = np.zeros_like(logits.data)
            grad[rows] = probs[rows]
            grad[rows, targets[rows]] -= 1.0
            logits.accumulate(grad * (g / n_valid))

    out = _node(np.float64(value), (logits,), backward)
    return out


def _lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard set-function extension along sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum()
    union = gts + (1.0 - fg_sorted).cumsum()
    jaccard = 1.0 - intersection / union
    if fg_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_terms(probs: np.ndarray, targets: np.ndarray) -> Dict[int, float]:
    """Per-class Lovasz values for already-filtered rows (test oracle hook)."""
    values: Dict[int, float] = {}
    for cls in np.unique(targets):
        fg = (targets == cls).astype(np.float64)
        errors = np.abs(fg - probs[:, cls])
        order = np.argsort(-errors, kind="stable")
        values[int(cls)] = float(errors[order] @ _lovasz_grad(fg[order]))
    return values


def lovasz_softmax(probs: Tensor, targets: np.ndarray, ignore_label: int) -> Tensor:
    """Lovasz-Softmax: mean over classes present in the (non-ignored) targets.

    Per class, prediction errors |1{gt=c} - p_c| are sorted descending and
    weighted by the Jaccard-extension gradient. Rows must lie on the
    probability simplex.
    """
    m, c = probs.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (m,):
        raise DataError("targets shape does not match probs")
    row_sum = probs.data.sum(axis=1)
    if (np.abs(row_sum - 1.0) > _EPS_SIMPLEX).any() or (probs.data < -_EPS_SIMPLEX).any():
        raise DataError("probs rows must lie on the simplex")
    valid = targets != ignore_label
    rows = np.nonzero(valid)[0]
    if rows.size == 0:
        return _node(np.float64(0.0), (probs,), lambda: None)

    p = probs.data[rows]
    t = targets[rows]
    present = np.unique(t)
    # Per class: sorted error weights and signs, reused by the backward pass.
    weight_rows = np.zeros((present.size, rows.size), dtype=np.float64)
    sign_rows = np.zeros_like(weight_rows)
    total = 0.0
    for j, cls in enumerate(present):
        fg = (t == cls).astype(np.float64)
        margin = fg - p[:, cls]
        errors = np.abs(margin)
        order = np.argsort(-errors, kind="stable")
        grad_sorted = _lovasz_grad(fg[order])
        total += float(errors[order] @ grad_sorted)
        weights = np.empty_like(errors)
        weights[order] = grad_sorted
        weight_rows[j] = weights
        sign_rows[j] = np.sign(margin)
    value = total / present.size

    def backward():
        if probs.requires_grad:
            g = float(out.grad) / present.size
            grad = np.zeros_like(probs.data)
            for j, cls in enumerate(present):
                grad[rows, cls] += g * weight_rows[j] * (-sign_rows[j])
            probs.accumulate(grad)

    out = _node(np.float64(value), (probs,), backward)
    return out


def total_loss(point_logits: Tensor, point_targets: np.ndarray,
               frustum_logits: Iterable[Tensor],
               frustum_targets: Iterable[np.ndarray],
               ignore_label: int,
               weights: LossWeights = LossWeights()) -> Tensor:
    """Point cross-entropy plus weighted per-stage frustum supervision."""
    loss = cross_entropy(point_logits, point_targets, ignore_label)
    frustum_sum: Optional[Tensor] = None
    for logits, targets in zip(frustum_logits, frustum_targets):
        ce = cross_entropy(logits, targets, ignore_label)
        lov = lovasz_softmax(softmax_rows(logits), targets, ignore_label)
        stage = add(scale(ce, weights.frustum_ce_w),
                    scale(lov, weights.frustum_lovasz_w))
        frustum_sum = stage if frustum_sum is None else add(frustum_sum, stage)
    if frustum_sum is not None and weights.lambda_frustum != 0.0:
        loss = add(loss, scale(frustum_sum, weights.lambda_frustum))
    return loss


class MomentumSgd:
    """Plain momentum SGD: v <- mu v + g; p <- p - lr v; grads zeroed after."""

    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in '{name}'")
            v = self._velocity[name]
            v *= self.momentum
            v += g
            t.data -= self.lr * v
            t.grad = None
