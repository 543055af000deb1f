"""The segmentation network: residual U-Net with similarity fusion around every block.

Parameters live in a flat ``name -> ndarray`` map inside a :class:`Checkpoint`
so that optimizer state, persistence and gradient checks can all address
them by name. Naming scheme::

    enc{d}.conv1.w / .b    enc{d}.conv2.w / .b    enc{d}.proj.w / .b
    dec{d}.up.w / .b       dec{d}.conv1.w / .b    dec{d}.conv2.w / .b   dec{d}.proj.w / .b
    head{c}.w / .b         (c = global class index, 1-based)
"""
from __future__ import annotations

import contextlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError
from .fusion import FusionConfig, fusion_block
from .tensor import (Tensor, concat, concat_channels, conv2d, conv_transpose2d, maxpool2x2,
                     relu, sigmoid, add)

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    num_classes: int = 19
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        for name in ("in_channels", "base_channels", "depth", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if isinstance(self.fusion, dict):
            object.__setattr__(self, "fusion", FusionConfig.from_dict(self.fusion))

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input(self, h: int, w: int):
        m = 2 ** self.depth
        if h % m or w % m:
            raise ShapeError(f"input {h}x{w} not divisible by 2^depth = {m}")

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "base_channels": self.base_channels,
                "depth": self.depth, "num_classes": self.num_classes,
                "fusion": self.fusion.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["fusion"] = FusionConfig.from_dict(d.get("fusion", {}))
        return cls(**d)


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Ordered name -> shape map; this order is the canonical parameter order."""
    shapes: dict[str, tuple] = {}

    def block(prefix, cin, cout):
        shapes[f"{prefix}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv1.b"] = (cout,)
        shapes[f"{prefix}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{prefix}.conv2.b"] = (cout,)
        if cin != cout:
            shapes[f"{prefix}.proj.w"] = (cout, cin, 1, 1)
            shapes[f"{prefix}.proj.b"] = (cout,)

    cin = cfg.in_channels
    for d in range(cfg.depth):
        block(f"enc{d}", cin, cfg.width(d))
        cin = cfg.width(d)
    for d in reversed(range(cfg.depth)):
        shapes[f"dec{d}.up.w"] = (cin, cfg.width(d), 2, 2)
        shapes[f"dec{d}.up.b"] = (cfg.width(d),)
        block(f"dec{d}", 2 * cfg.width(d), cfg.width(d))
        cin = cfg.width(d)
    for c in range(1, cfg.num_classes + 1):
        shapes[f"head{c}.w"] = (1, cfg.width(0), 1, 1)
        shapes[f"head{c}.b"] = (1,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if ".up." in name:
        return shape[0]  # each transposed-conv output sees one tap per input channel
    return int(np.prod(shape[1:]))


@dataclass
class Checkpoint:
    config: NetworkConfig
    parameters: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val_loss: float = float("inf")
    label_space: dict | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.parameters.items()},
                          {k: v.copy() for k, v in self.adam_m.items()},
                          {k: v.copy() for k, v in self.adam_v.items()},
                          self.step, self.epoch, self.best_val_loss,
                          None if self.label_space is None else json.loads(json.dumps(self.label_space)),
                          json.loads(json.dumps(self.meta)))

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return load_checkpoint(path)


def init_parameters(cfg: NetworkConfig, seed: int) -> Checkpoint:
    """He-normal kernels, zero biases, all drawn from one seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / _fan_in(name, shape)), size=shape)
    return Checkpoint(cfg, params)


# --------------------------------------------------------------------------
# forward

@contextlib.contextmanager
def _layer(name):
    try:
        yield
    except NumericError as exc:
        raise NumericError(f"layer {name}: {exc}") from exc


def residual_double_conv(x: Tensor, params: dict, prefix: str) -> Tensor:
    """relu(conv(relu(conv(x))) + shortcut(x)); shortcut is 1x1 conv when widths differ."""
    h = relu(conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    h = conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    if f"{prefix}.proj.w" in params:
        skip = conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"], padding=0)
    else:
        skip = x
    return relu(add(h, skip))


def as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
            for k, v in params.items()}


def forward_logits(x, params: dict, cfg: NetworkConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input (B, {cfg.in_channels}, H, W), got {x.shape}")
    cfg.check_input(*x.shape[2:])
    P = as_tensors(params)
    fz = cfg.fusion

    skips = []
    h = x
    for d in range(cfg.depth):
        with _layer(f"enc{d}"):
            h = fusion_block(h, fz)
            h = residual_double_conv(h, P, f"enc{d}")
            h = fusion_block(h, fz)
            skips.append(h)
            h, _ = maxpool2x2(h)
    with _layer("bridge"):
        h = fusion_block(h, fz)
    for d in reversed(range(cfg.depth)):
        with _layer(f"dec{d}"):
            h = conv_transpose2d(h, P[f"dec{d}.up.w"], P[f"dec{d}.up.b"])
            h = concat_channels([h, skips[d]])
            h = fusion_block(h, fz)
            h = residual_double_conv(h, P, f"dec{d}")
            h = fusion_block(h, fz)
    with _layer("heads"):
        classes = range(1, cfg.num_classes + 1)
        w = concat([P[f"head{c}.w"] for c in classes], axis=0)
        b = concat([P[f"head{c}.b"] for c in classes], axis=0)
        return conv2d(h, w, b, padding=0)


def forward(x, model, cfg: NetworkConfig | None = None) -> Tensor:
    """Per-class sigmoid probabilities, shape (B, num_classes, H, W).

    ``model`` is a :class:`Checkpoint` or a parameter map (arrays or
    Tensors) together with ``cfg``.
    """
    if isinstance(model, Checkpoint):
        cfg, params = model.config, model.parameters
    else:
        params = model
        if cfg is None:
            raise ConfigError("forward() with a parameter map needs a NetworkConfig")
    logits = forward_logits(x, params, cfg)
    with _layer("sigmoid"):
        return sigmoid(logits)


# --------------------------------------------------------------------------
# persistence

def _tensor_entries(ck: Checkpoint):
    for prefix, table in (("param", ck.parameters), ("adam_m", ck.adam_m), ("adam_v", ck.adam_v)):
        for name in parameter_shapes(ck.config):
            if name in table:
                yield f"{prefix}/{name}", table[name]


def save_checkpoint(ck: Checkpoint, path):
    """Write the MMCK container: magic, u32 version, u64 manifest length,
    UTF-8 JSON manifest, then little-endian float64 payload."""
    directory = []
    blobs = []
    offset = 0
    for name, arr in _tensor_entries(ck):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "config": ck.config.to_dict(),
        "step": ck.step,
        "epoch": ck.epoch,
        "best_val_loss": ck.best_val_loss,
        "label_space": ck.label_space,
        "meta": ck.meta,
        "tensors": directory,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(head)))
    buf.write(head)
    for raw in blobs:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError("checkpoint header truncated", offset=len(blob))
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    version, mlen = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    start = 16
    if start + mlen > len(blob):
        raise FormatError("checkpoint manifest truncated", offset=len(blob))
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint manifest unreadable: {exc}", offset=start) from exc
    data_start = start + mlen
    if data_start + manifest["payload_bytes"] != len(blob):
        raise FormatError("checkpoint payload length mismatch",
                          offset=min(len(blob), data_start + manifest["payload_bytes"]))
    cfg = NetworkConfig.from_dict(manifest["config"])
    tables = {"param": {}, "adam_m": {}, "adam_v": {}}
    expected = parameter_shapes(cfg)
    for entry in manifest["tensors"]:
        prefix, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        if expected.get(name) != shape:
            raise FormatError(f"tensor {entry['name']} has shape {shape}, config expects "
                              f"{expected.get(name)}", offset=start)
        n = int(np.prod(shape))
        lo = data_start + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=lo).astype(np.float64).reshape(shape)
        tables[prefix][name] = arr
    missing = set(expected) - set(tables["param"])
    if missing:
        raise FormatError(f"checkpoint lacks parameters {sorted(missing)[:3]}", offset=start)
    return Checkpoint(cfg, tables["param"], tables["adam_m"], tables["adam_v"],
                      manifest["step"], manifest["epoch"], float(manifest["best_val_loss"]),
                      manifest["label_space"], manifest.get("meta", {}))
