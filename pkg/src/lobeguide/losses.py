"""Training losses for the detection/segmentation stack, with analytic gradients.

Every loss takes plain float64 arrays wrapped in small validated pair types and
returns a scalar float. Gradients are implemented alongside each loss and are
checked against `numeric_gradient` in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

LOG_EPS = 1e-12
DICE_EPS = 1e-7


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"{name} must be a non-empty 1D array")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ProbTargetPair:
    """Predicted probabilities p in [0,1] and binary targets y, equal length."""

    p: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        p = _as_vector(self.p, "p")
        y = _as_vector(self.y, "y")
        if p.shape != y.shape:
            raise ValueError(f"p and y lengths differ: {p.shape} vs {y.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("p values must lie in [0, 1]")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("y values must be 0 or 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class BoxRegressionPair:
    """Predicted and ground-truth box parameter vectors (6 reals each)."""

    pred: np.ndarray
    gt: np.ndarray
    delta: float = 1.0

    def __post_init__(self) -> None:
        pred = _as_vector(self.pred, "pred")
        gt = _as_vector(self.gt, "gt")
        if pred.shape != gt.shape:
            raise ValueError("pred and gt lengths differ")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "gt", gt)

    @property
    def mae(self) -> float:
        return float(np.abs(self.pred - self.gt).mean())


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")


def cross_entropy(pair: ProbTargetPair) -> float:
    """-sum_i y_i * log(max(p_i, 1e-12))."""
    return float(-(pair.y * np.log(np.maximum(pair.p, LOG_EPS))).sum())


def cross_entropy_grad(pair: ProbTargetPair) -> np.ndarray:
    """d/dp of cross_entropy; zero where the clamp is active."""
    grad = np.zeros_like(pair.p)
    live = pair.p > LOG_EPS
    grad[live] = -pair.y[live] / pair.p[live]
    return grad


def dice_loss(pair: ProbTargetPair) -> float:
    """1 - (2*sum(y*p) + eps) / (sum(y^2) + sum(p^2) + eps), eps = 1e-7."""
    num = 2.0 * float((pair.y * pair.p).sum()) + DICE_EPS
    den = float((pair.y**2).sum() + (pair.p**2).sum()) + DICE_EPS
    return 1.0 - num / den


def dice_loss_grad(pair: ProbTargetPair) -> np.ndarray:
    num = 2.0 * float((pair.y * pair.p).sum()) + DICE_EPS
    den = float((pair.y**2).sum() + (pair.p**2).sum()) + DICE_EPS
    return -(2.0 * pair.y * den - num * 2.0 * pair.p) / (den * den)


def dual_loss(pair: ProbTargetPair) -> float:
    """Sum of cross entropy and dice loss on the same pair."""
    return cross_entropy(pair) + dice_loss(pair)


def dual_loss_grad(pair: ProbTargetPair) -> np.ndarray:
    return cross_entropy_grad(pair) + dice_loss_grad(pair)


def smooth_l1(pair: BoxRegressionPair) -> float:
    """Huber-style loss on the MAE over the box parameters.

    0.5 * mae^2 / delta when mae < delta, else mae - 0.5 * delta.
    """
    mae = pair.mae
    if mae < pair.delta:
        return 0.5 * mae * mae / pair.delta
    return mae - 0.5 * pair.delta


def smooth_l1_grad(pair: BoxRegressionPair) -> np.ndarray:
    """d/dpred of smooth_l1 (undefined exactly at pred_i == gt_i; 0 is used)."""
    mae = pair.mae
    outer = mae / pair.delta if mae < pair.delta else 1.0
    inner = np.sign(pair.pred - pair.gt) / pair.pred.size
    return outer * inner


def focal_loss(p: float, y: int, params: FocalParams = FocalParams()) -> float:
    """Binary focal loss at a single probability.

    y=1: -alpha * (1-p)^gamma * log(max(p, eps))
    y=0: -(1-alpha) * p^gamma * log(max(1-p, eps)), eps = 1e-12.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    if y == 1:
        return float(-params.alpha * (1.0 - p) ** params.gamma * np.log(max(p, LOG_EPS)))
    return float(
        -(1.0 - params.alpha) * p**params.gamma * np.log(max(1.0 - p, LOG_EPS))
    )


def focal_loss_grad(p: float, y: int, params: FocalParams = FocalParams()) -> float:
    """d/dp of focal_loss away from the clamp boundaries."""
    a, g = params.alpha, params.gamma
    if y == 1:
        q = max(p, LOG_EPS)
        term = -a * (1.0 - p) ** g / q
        if g > 0:
            term += a * g * (1.0 - p) ** (g - 1.0) * np.log(q)
        return float(term)
    q = max(1.0 - p, LOG_EPS)
    term = (1.0 - a) * p**g / q
    if g > 0:
        term -= (1.0 - a) * g * p ** (g - 1.0) * np.log(q)
    return float(term)


def binary_cross_entropy(p: float, y: int) -> float:
    """-[y log p + (1-y) log(1-p)] with the same 1e-12 clamps as focal_loss."""
    if y == 1:
        return float(-np.log(max(p, LOG_EPS)))
    return float(-np.log(max(1.0 - p, LOG_EPS)))


def numeric_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise ValueError("step size must be positive")
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi.flat[i] += h
        lo.flat[i] -= h
        fh, fl = f(hi), f(lo)
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise ValueError("function returned a non-finite value")
        grad.flat[i] = (fh - fl) / (2.0 * h)
    return grad
