from __future__ import annotations

import numpy as np

from .numerics import ShapeError, Tensor, ops

DICE_SMOOTH = 1e-5


def soft_dice(probs: Tensor, target: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """Per-sample soft Dice over all voxels, averaged over the batch axis."""
    axes = tuple(range(1, probs.ndim)) if probs.ndim > 3 else None
    t = Tensor(target, dtype=probs.dtype)
    inter = ops.sum(ops.mul(probs, t), axis=axes)
    denom = ops.add(ops.sum(probs, axis=axes), ops.sum(t, axis=axes))
    dice = ops.div(ops.add(ops.mul(inter, 2.0), smooth), ops.add(denom, smooth))
    return ops.mean(dice)


def dice_bce_loss(logits: Tensor, target, w_dice: float = 1.0, w_bce: float = 1.0,
                  smooth: float = DICE_SMOOTH) -> Tensor:
    """``w_dice · (1 − softDice(σ(logits), target)) + w_bce · mean BCE(logits, target)``."""
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ShapeError("dice_bce_loss", logits.shape, target.shape)
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("dice_bce_loss: target must be binary")
    if w_dice < 0 or w_bce < 0:
        raise ValueError("loss weights must be >= 0")
    target = target.astype(logits.dtype)
    bce = ops.mean(ops.bce_with_logits(logits, target))
    dice = soft_dice(ops.sigmoid(logits), target, smooth)
    return ops.add(ops.mul(ops.sub(1.0, dice), w_dice), ops.mul(bce, w_bce))
