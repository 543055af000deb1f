"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active,
every op that touches a tensor with ``requires_grad`` appends a node holding
its operands and a backward rule; :meth:`Tape.backward` walks the nodes in
reverse recording order and accumulates gradients additively.

Outside a tape nothing is recorded, which is the inference path.
"""
from __future__ import annotations

import contextlib
import functools
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, GatherIndexError, NumericError, ShapeError

_TAPES: list["Tape"] = []
_DECISIONS: list[list] = []


class Tensor:
    """N-d float64 array plus gradient bookkeeping (layout B x C x H x W)."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 5:
            raise ShapeError(f"tensor order {arr.ndim} exceeds 5")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Single-owner record of differentiable ops, used as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, name, inputs, output, backward):
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(name, inputs, output, backward))

    def backward(self, root: Tensor, grad: np.ndarray | None = None):
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if root.data.size != 1:
                raise ShapeError("backward from a non-scalar needs an explicit gradient")
            grad = np.ones_like(root.data)
        pending = {id(root): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if self._owns(t):
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        # the root itself may be a leaf
        g = pending.pop(id(root), None)
        if g is not None and not self._owns(root):
            root.grad = g if root.grad is None else root.grad + g

    def _owns(self, t: Tensor) -> bool:
        i = t.tape_id
        return i is not None and i < len(self.nodes) and self.nodes[i].output is t


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording (the tape stack is restored on exit)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


@contextlib.contextmanager
def record_decisions():
    """Collect every piecewise decision (relu masks, pool/select indices) made inside.

    Gradient checks compare these between perturbed evaluations to skip
    points where a finite difference straddles a kink.
    """
    log: list = []
    _DECISIONS.append(log)
    try:
        yield log
    finally:
        _DECISIONS.remove(log)


def _decision(kind: str, arr: np.ndarray):
    if _DECISIONS:
        for log in _DECISIONS:
            log.append((kind, arr.copy()))


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {name}")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, tuple(inputs), out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(p) -> tuple[int, int]:
    if isinstance(p, (tuple, list)):
        return int(p[0]), int(p[1])
    return int(p), int(p)


# --------------------------------------------------------------------------
# convolution family

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding=None) -> Tensor:
    """Stride-1 cross-correlation. ``padding=None`` means 'same' for odd kernels."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Ci}")
    if padding is None and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError("'same' padding needs odd kernel extents")
    ph, pw = (kh // 2, kw // 2) if padding is None else _pair(padding)
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d output would be empty")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({Co},)")

    pointwise = kh == 1 and kw == 1 and ph == 0 and pw == 0
    cols = x.data.reshape(B, C, H * W) if pointwise else kernels.im2col(x.data, kh, kw, ph, pw)
    w2 = kernel.data.reshape(Co, Ci * kh * kw)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, Co, Ho, Wo)

    def backward(g):
        g3 = g.reshape(B, Co, Ho * Wo)
        gk = gx = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gx = gcols.reshape(B, C, H, W)
            else:
                gx = kernels.col2im(np.ascontiguousarray(gcols), C, H, W, kh, kw, ph, pw)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2, 2x2 transposed convolution; kernel layout (Cin, Cout, 2, 2)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-d input and kernel")
    B, C, H, W = x.shape
    Ci, Co, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {C}, kernel expects {Ci}")
    if (kh, kw) != (2, 2):
        raise ShapeError("conv_transpose2d supports only 2x2 kernels with stride 2")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({Co},)")

    x3 = x.data.reshape(B, C, H * W)
    k2 = kernel.data.reshape(C, Co * 4)
    y = np.matmul(k2.T, x3)  # (B, Co*4, HW)
    out = (y.reshape(B, Co, 2, 2, H, W)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(B, Co, 2 * H, 2 * W))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g3 = (g.reshape(B, Co, H, 2, W, 2)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(B, Co * 4, H * W))
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.matmul(k2, g3).reshape(B, C, H, W)
        if kernel.requires_grad:
            gk = np.tensordot(x3, g3, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv_transpose2d", np.ascontiguousarray(out), inputs, backward)


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2/2 max-pool. Indices are row-major window positions 0..3, first max wins."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2x2 expects a 4-d input")
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    out, idx = kernels.maxpool2x2_forward(x.data)
    _decision("maxpool2x2", idx)

    def backward(g):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx),)

    return _emit("maxpool2x2", out, (x,), backward), idx


# --------------------------------------------------------------------------
# elementwise and structural

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    _decision("relu", mask)
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split by sign to keep exp() from overflowing
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _emit("scale", c * x.data, (x,), lambda g: (c * g,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat shape mismatch {t.shape} vs {ref}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(tensors)))

    return _emit("concat", out, tensors, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    if any(t.shape != ref for t in tensors):
        raise ShapeError("stack needs equal shapes")
    out = np.stack([t.data for t in tensors])
    return _emit("stack", out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))))


def gather(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick ``x[indices[p], p]`` for every trailing position p (gather along axis 0).

    Backward scatters the incoming gradient back to the picked slots.
    """
    x = _as_tensor(x)
    idx = np.asarray(indices)
    if idx.shape != x.shape[1:]:
        raise ShapeError(f"gather indices shape {idx.shape} != {x.shape[1:]}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx.min()) if idx.min() < 0 else int(idx.max())
        raise GatherIndexError(f"gather index {bad} outside [0, {n})")
    idx = idx.astype(np.intp)
    out = np.take_along_axis(x.data, idx[None], axis=0)[0]

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx[None], g[None], axis=0)
        return (gx,)

    return _emit("gather", out, (x,), backward)


# --------------------------------------------------------------------------
# fixed gaussian smoothing

@functools.lru_cache(maxsize=None)
def gaussian_weights(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps for offsets -r..r, r = ceil(3 sigma)."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    r = int(math.ceil(3.0 * sigma))
    offs = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-offs ** 2 / (2.0 * sigma * sigma))
    w /= w.sum()
    w.setflags(write=False)
    return w


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index without repeating the edge sample."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


@functools.lru_cache(maxsize=None)
def _taps(sigma: float, n: int) -> np.ndarray:
    r = (len(gaussian_weights(sigma)) - 1) // 2
    taps = np.array([[reflect_index(i + o, n) for o in range(-r, r + 1)] for i in range(n)],
                    dtype=np.intp)
    taps.setflags(write=False)
    return taps


def gaussian_blur2d(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian smoothing with reflect borders; weights are constants."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("gaussian_blur2d expects a 4-d input")
    w = gaussian_weights(float(sigma))
    B, C, H, W = x.shape
    th, tw = _taps(float(sigma), H), _taps(float(sigma), W)
    x3 = x.data.reshape(B * C, H, W)
    tmp = kernels.blur_last(x3, tw, w)
    out = kernels.blur_mid(tmp, th, w).reshape(B, C, H, W)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(B * C, H, W)
        gt = kernels.blur_mid_backward(g3, th, w)
        return (kernels.blur_last_backward(gt, tw, w).reshape(B, C, H, W),)

    return _emit("gaussian_blur2d", out, (x,), backward)
