"""Class-adaptive loss: masked binary cross-entropy plus batch-joint Dice.

``onehot`` targets are (B, C, H, W) arrays in {0, 1}; ``mask`` is a
(B, C) boolean array, True where the sample's source dataset annotates
the class. Masked (sample, class) pairs are invisible to both terms,
so their prediction gradients are exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateLossError, ShapeError
from .tensor import Tensor, _as_tensor, _emit, add, scale

CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.bce_weight == 0 and self.dice_weight == 0:
            raise ConfigError("at least one loss weight must be positive")
        if not self.epsilon > 0:
            raise ConfigError("dice epsilon must be positive")

    def to_dict(self):
        return {"bce_weight": self.bce_weight, "dice_weight": self.dice_weight,
                "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _prepare(pred, onehot, mask):
    pred = _as_tensor(pred)
    y = np.asarray(onehot, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if pred.data.ndim != 4 or y.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and target {y.shape} must match (B,C,H,W)")
    if m.shape != pred.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} != {pred.shape[:2]}")
    if not m.any():
        raise DegenerateLossError("no annotated (sample, class) pair in batch")
    return pred, y, m


def masked_bce(pred, onehot, mask) -> Tensor:
    """Mean pixel BCE over annotated (sample, class) pairs.

    Predictions are clamped to [1e-12, 1 - 1e-12]; clamped entries get zero gradient.
    """
    pred, y, m = _prepare(pred, onehot, mask)
    p = np.clip(pred.data, CLAMP, 1.0 - CLAMP)
    w = m[:, :, None, None]
    per_px = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    count = m.sum() * pred.shape[2] * pred.shape[3]
    value = np.where(w, per_px, 0.0).sum() / count

    def backward(g):
        inside = (pred.data > CLAMP) & (pred.data < 1.0 - CLAMP)
        d = np.where(w & inside, (p - y) / (p * (1.0 - p)), 0.0)
        return (g * d / count,)

    return _emit("masked_bce", np.array(value), (pred,), backward)


def dice_terms(pred_data: np.ndarray, onehot: np.ndarray, mask: np.ndarray) -> dict:
    """Per-class joint sums {c: (sum p*y, sum p, sum y)} over annotated samples only."""
    terms = {}
    for c in range(pred_data.shape[1]):
        rows = mask[:, c]
        if not rows.any():
            continue
        p = pred_data[rows, c]
        y = onehot[rows, c]
        terms[c] = (float((p * y).sum()), float(p.sum()), float(y.sum()))
    return terms


def joint_dice_loss(pred, onehot, mask, epsilon: float = 1e-5) -> Tensor:
    """1 - mean over classes of (2 sum py + eps) / (sum p + sum y + eps).

    Sums pool every pixel of every annotated sample in the batch before the
    ratio is formed; classes nobody in the batch annotates are skipped.
    """
    pred, y, m = _prepare(pred, onehot, mask)
    terms = dice_terms(pred.data, y, m)
    classes = sorted(terms)
    k = len(classes)
    dice = {c: (2.0 * terms[c][0] + epsilon) / (terms[c][1] + terms[c][2] + epsilon)
            for c in classes}
    value = 1.0 - sum(dice[c] for c in classes) / k

    def backward(g):
        grad = np.zeros(pred.shape)
        for c in classes:
            inter, sp, sy = terms[c]
            denom = sp + sy + epsilon
            rows = m[:, c]
            d = (2.0 * y[rows, c] * denom - (2.0 * inter + epsilon)) / (denom * denom)
            grad[rows, c] = -d / k
        return (g * grad,)

    return _emit("joint_dice_loss", np.array(value), (pred,), backward)


def per_image_dice_loss(pred_data, onehot, mask, epsilon: float = 1e-5) -> float:
    """Conventional per-image Dice loss (ratio per sample, then averaged). Reference only."""
    scores = []
    for c in range(pred_data.shape[1]):
        for b in range(pred_data.shape[0]):
            if not mask[b, c]:
                continue
            p, t = pred_data[b, c], onehot[b, c]
            scores.append((2.0 * (p * t).sum() + epsilon) / (p.sum() + t.sum() + epsilon))
    return 1.0 - float(np.mean(scores))


def total_loss(pred, onehot, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    terms = []
    if cfg.bce_weight > 0:
        t = masked_bce(pred, onehot, mask)
        terms.append(t if cfg.bce_weight == 1.0 else scale(t, cfg.bce_weight))
    if cfg.dice_weight > 0:
        t = joint_dice_loss(pred, onehot, mask, cfg.epsilon)
        terms.append(t if cfg.dice_weight == 1.0 else scale(t, cfg.dice_weight))
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])
