"""MMIV volume container.

Layout (little-endian)::

    0   4s   magic b"MMIV"
    4   u32  version (1)
    8   u32  sample format: 0 = float64 image, 1 = uint16 label map
    12  3u32 D, H, W
    24  3f64 spacing in mm (D, H, W axes)
    48  ...  D*H*W samples, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MMIV"
VERSION = 1
HEADER = struct.Struct("<4sII3I3d")
FORMATS = {0: np.dtype("<f8"), 1: np.dtype("<u2")}
MAX_SAMPLES = 1 << 32


@dataclass
class Volume:
    data: np.ndarray  # (D, H, W)
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be three positive extents, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def is_label(self) -> bool:
        return self.data.dtype.kind in "ui"

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


def encode_volume(vol: Volume) -> bytes:
    if vol.is_label:
        if vol.data.min() < 0 or vol.data.max() > 0xFFFF:
            raise ValueError("label values must fit in uint16")
        fmt = 1
    else:
        fmt = 0
    D, H, W = vol.dims
    head = HEADER.pack(MAGIC, VERSION, fmt, D, H, W, *vol.spacing)
    return head + np.ascontiguousarray(vol.data, dtype=FORMATS[fmt]).tobytes()


def write_volume(vol: Volume, path):
    Path(path).write_bytes(encode_volume(vol))


def decode_volume(blob: bytes) -> Volume:
    if len(blob) < HEADER.size:
        raise FormatError(f"header truncated: {len(blob)} of {HEADER.size} bytes", offset=len(blob))
    magic, version, fmt, D, H, W, *spacing = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if fmt not in FORMATS:
        raise FormatError(f"unknown sample format {fmt}", offset=8)
    if min(D, H, W) < 1:
        raise FormatError(f"non-positive dims {D}x{H}x{W}", offset=12)
    n = D * H * W
    if n > MAX_SAMPLES:
        raise FormatError(f"dims {D}x{H}x{W} overflow the sample limit", offset=12)
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"invalid spacing {spacing}", offset=24)
    dtype = FORMATS[fmt]
    end = HEADER.size + n * dtype.itemsize
    if len(blob) < end:
        raise FormatError(f"payload truncated: expected {end} bytes, found {len(blob)}",
                          offset=len(blob))
    if len(blob) > end:
        raise FormatError(f"{len(blob) - end} trailing bytes after payload", offset=end)
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=HEADER.size).reshape(D, H, W)
    native = np.float64 if fmt == 0 else np.uint16
    return Volume(data.astype(native), tuple(spacing))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())
