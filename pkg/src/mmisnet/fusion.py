"""Similarity fusion: rebuild a feature map from three smoothed copies.

Each feature map is blurred at three fixed scales. At every (b, c, h, w)
the three smoothed values form a group; one value (or the closest pair)
is kept and the rest discarded. Gradients follow the kept values back
through the blurs, the same way max-pool routes to its argmax.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .tensor import Tensor, _decision, gather, gaussian_blur2d, scale, add, stack


class Variant(str, enum.Enum):
    SELECT_ONE = "select_one"
    FUSE_CLOSEST_PAIR = "fuse_closest_pair"


@dataclass(frozen=True)
class FusionConfig:
    sigmas: tuple = (0.5, 1.0, 2.0)
    variant: Variant = Variant.SELECT_ONE

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        object.__setattr__(self, "variant", Variant(self.variant))
        if len(sig) != 3:
            raise ConfigError(f"exactly three sigmas required, got {len(sig)}")
        if not all(s > 0 for s in sig):
            raise ConfigError(f"sigmas must be positive: {sig}")
        if not (sig[0] < sig[1] < sig[2]):
            raise ConfigError(f"sigmas must be strictly increasing: {sig}")

    def to_dict(self) -> dict:
        return {"sigmas": list(self.sigmas), "variant": self.variant.value}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(sigmas=tuple(d.get("sigmas", (0.5, 1.0, 2.0))),
                   variant=Variant(d.get("variant", Variant.SELECT_ONE.value)))


def smooth_stack(x: Tensor, cfg: FusionConfig) -> Tensor:
    """Three blurred copies stacked on a new leading axis, smallest sigma first."""
    return stack([gaussian_blur2d(x, s) for s in cfg.sigmas])


def selection_indices(values: np.ndarray, cfg: FusionConfig):
    """Run the selection rule on a raw (3, ...) array.

    Returns ``(selected, first, second)`` shaped like ``values[0]``. For
    SELECT_ONE both index arrays name the winner.
    """
    if values.ndim < 1 or values.shape[0] != 3:
        raise ShapeError(f"selection needs a stack of exactly 3 maps, got {values.shape}")
    tail = values.shape[1:]
    flat = np.ascontiguousarray(values.reshape(3, -1))
    val, ia, ib = kernels.select_similar(flat, cfg.variant is Variant.FUSE_CLOSEST_PAIR)
    return val.reshape(tail), ia.reshape(tail), ib.reshape(tail)


def select_similar(stacked: Tensor, cfg: FusionConfig) -> tuple[Tensor, np.ndarray]:
    """Per-position pick from the three smoothed maps.

    Score of member i is the summed absolute difference to the other two;
    SELECT_ONE keeps the lowest-scoring member, FUSE_CLOSEST_PAIR averages
    the two members nearest each other. Ties go to the lower index.
    Returns the fused tensor and the index array(s): shape ``(B,C,H,W)``
    for SELECT_ONE, ``(2,B,C,H,W)`` for the pair variant.
    """
    if stacked.data.ndim != 5 or stacked.shape[0] != 3:
        raise ShapeError(f"select_similar needs a (3,B,C,H,W) stack, got {stacked.shape}")
    _, ia, ib = selection_indices(stacked.data, cfg)
    if cfg.variant is Variant.SELECT_ONE:
        _decision("fusion", ia)
        return gather(stacked, ia), ia
    pair = np.stack([ia, ib])
    _decision("fusion", pair)
    out = scale(add(gather(stacked, ia), gather(stacked, ib)), 0.5)
    return out, pair


def fusion_block(x: Tensor, cfg: FusionConfig) -> Tensor:
    out, _ = select_similar(smooth_stack(x, cfg), cfg)
    return out
