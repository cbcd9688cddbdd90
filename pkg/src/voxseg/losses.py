"""Training objectives over probability maps and one-hot targets.

Three losses: multi-class cross entropy, soft dice with an additive
smoothing constant, and their unweighted sum.  All operate on a
(N, L, D, H, W) probability tensor paired with a same-shape one-hot
target, reduce in float64 and register analytic adjoints on the tape.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, record_op


class LossKind(enum.Enum):
    CE = "ce"
    DICE = "dice"
    COMBINED = "combined"


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.CE
    dice_epsilon: float = 1e-4
    log_floor: float = 1e-12

    def __post_init__(self):
        if self.dice_epsilon <= 0:
            raise ConfigError("dice_epsilon must be positive")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


def _check_pair(p: Tensor, y: Tensor):
    if p.data.shape != y.data.shape:
        raise ShapeError(f"loss: shapes differ, {p.data.shape} vs {y.data.shape}")
    if p.data.ndim != 5:
        raise ShapeError(f"loss expects (N, L, D, H, W) tensors, got {p.data.shape}")


def cross_entropy(p: Tensor, y: Tensor, log_floor: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of the true class per voxel.

    Probabilities are clamped from below at ``log_floor`` inside the log, so
    the value stays finite for hard-zero predictions.
    """
    _check_pair(p, y)
    n = p.data.shape[0]
    omega = p.data.shape[2] * p.data.shape[3] * p.data.shape[4]
    clamped = np.maximum(p.data, np.float32(log_floor))
    val = -(y.data.astype(np.float64) * np.log(clamped.astype(np.float64))).sum()
    result = Tensor(np.float32(val / (n * omega)))

    def vjp(g):
        if not p.requires_grad:
            return (None, None)
        active = p.data >= np.float32(log_floor)
        gp = (-float(g) / (n * omega)) * (y.data / clamped) * active
        return gp.astype(np.float32), None

    return record_op(result, (p, y), vjp)


def dice_loss(p: Tensor, y: Tensor, eps: float = 1e-4) -> Tensor:
    """Soft dice: one minus the smoothed overlap ratio, averaged over classes.

    A class absent from both maps contributes a ratio of eps/eps = 1, i.e.
    zero loss, which is what the smoothing constant is for.
    """
    _check_pair(p, y)
    n, l = p.data.shape[0], p.data.shape[1]
    pd = p.data.astype(np.float64)
    yd = y.data.astype(np.float64)
    inter = (yd * pd).sum(axis=(2, 3, 4))  # (N, L)
    total = (yd + pd).sum(axis=(2, 3, 4))
    num = eps + 2.0 * inter
    den = eps + total
    ratio = num / den
    result = Tensor(np.float32(1.0 - ratio.sum() / (l * n)))

    def vjp(g):
        if not p.requires_grad:
            return (None, None)
        # d(num/den)/dp(v) = (2 y(v) den - num) / den^2
        coeff = -float(g) / (l * n)
        gp = coeff * (2.0 * yd * den[:, :, None, None, None] - num[:, :, None, None, None]) / (
            den[:, :, None, None, None] ** 2
        )
        return gp.astype(np.float32), None

    return record_op(result, (p, y), vjp)


def combined_loss(p: Tensor, y: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Unweighted sum of cross entropy and dice."""
    cfg = cfg or LossConfig(kind=LossKind.COMBINED)
    return add(
        cross_entropy(p, y, log_floor=cfg.log_floor),
        dice_loss(p, y, eps=cfg.dice_epsilon),
    )


def compute_loss(p: Tensor, y: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.kind is LossKind.CE:
        return cross_entropy(p, y, log_floor=cfg.log_floor)
    if cfg.kind is LossKind.DICE:
        return dice_loss(p, y, eps=cfg.dice_epsilon)
    return combined_loss(p, y, cfg)
