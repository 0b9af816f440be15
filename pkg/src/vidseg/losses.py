"""Training objectives: weighted cross-entropy and soft dice loss.

Both losses consume a probability map and a binary target and return the
scalar together with its analytic gradient with respect to the probability
map; the caller seeds the network's backward pass with that gradient.
Cross-entropy weighting scales foreground pixels by the background-to-
foreground pixel-count ratio so that sparse objects are not drowned out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, _accumulate, _make_node

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossValue:
    """A scalar loss and its gradient w.r.t. the probability map."""

    scalar: float
    grad: np.ndarray


class DegenerateSampleError(ValueError):
    """Raised for targets that cannot produce a foreground weight."""


def foreground_weight(target) -> float:
    """Background-to-foreground pixel-count ratio of a binary target.

    An all-background target is unusable for weighting and raises; an
    all-foreground target returns 0.0 with a warning (callers should floor
    the weight at 1).
    """
    target = np.asarray(target)
    fg = int(np.count_nonzero(target))
    if fg == 0:
        raise DegenerateSampleError(
            "all-background target: no foreground pixels to weight"
        )
    bg = target.size - fg
    if bg == 0:
        warnings.warn("all-foreground target: returning ratio 0, apply the weight floor")
        return 0.0
    return bg / fg


def make_weight_map(target, ratio: float | None = None) -> np.ndarray:
    """Per-pixel weights: 1 on background, the bg/fg ratio on foreground.

    Degenerate ratios (<= 0) are floored at 1 so the sample still trains.
    """
    target = np.asarray(target)
    if ratio is None:
        ratio = foreground_weight(target)
    if ratio <= 0:
        ratio = 1.0
    weights = np.ones(target.shape, dtype=np.float64)
    weights[target != 0] = ratio
    return weights


def _check_pair(pred, target, weights=None):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != pred.shape:
            raise ShapeError(f"weight shape {weights.shape} != prediction shape {pred.shape}")
    return pred, target, weights


def weighted_cross_entropy(pred, target, weights=None) -> LossValue:
    """Mean over pixels of -w(x) [t log q + (1-t) log(1-q)].

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs. With
    ``weights`` omitted the result is plain binary cross-entropy.
    """
    pred, target, weights = _check_pair(pred, target, weights)
    if weights is None:
        weights = np.ones_like(pred)
    q = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    n = pred.size
    scalar = float(
        -(weights * (target * np.log(q) + (1.0 - target) * np.log1p(-q))).sum() / n
    )
    grad = -weights * (target / q - (1.0 - target) / (1.0 - q)) / n
    return LossValue(scalar, grad)


def dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> LossValue:
    """Soft dice: 1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)."""
    pred, target, _ = _check_pair(pred, target)
    inter = float((pred * target).sum())
    total = float(pred.sum() + target.sum())
    denom = total + smooth
    scalar = 1.0 - (2.0 * inter + smooth) / denom
    grad = -(2.0 * target * denom - (2.0 * inter + smooth)) / (denom * denom)
    return LossValue(scalar, grad)


def cross_entropy_op(pred: Tensor, target, weights=None) -> Tensor:
    """Weighted cross-entropy as an autodiff node over a prediction tensor."""
    lv = weighted_cross_entropy(pred.data, target, weights)

    def backward(go):
        if pred._needs_grad():
            _accumulate(pred, float(go) * lv.grad)

    return _make_node(np.asarray(lv.scalar), (pred,), backward)


def dice_op(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft dice loss as an autodiff node over a prediction tensor."""
    lv = dice_loss(pred.data, target, smooth)

    def backward(go):
        if pred._needs_grad():
            _accumulate(pred, float(go) * lv.grad)

    return _make_node(np.asarray(lv.scalar), (pred,), backward)
