"""Finite-difference verification of every differentiable op.

Each check builds a scalar function of one array, takes the analytic
gradient off the tape, and compares it with central differences. Points
whose piecewise decisions (relu masks, pool argmax, fusion picks) change
between x-h, x and x+h are skipped: the difference quotient straddles a
kink there and says nothing about the derivative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import FusionConfig, Variant, fusion_block
from .loss import LossConfig, joint_dice_loss, masked_bce, total_loss
from .network import NetworkConfig, as_tensors, forward, init_parameters

STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.rel_error <= self.tolerance


def _same_decisions(a, b) -> bool:
    if len(a) != len(b):
        return False
    return all(ka == kb and np.array_equal(va, vb) for (ka, va), (kb, vb) in zip(a, b))


def numerical_gradient(fn: Callable[[], float], arr: np.ndarray, h: float = STEP,
                       coords=None):
    """Central differences of ``fn`` w.r.t. ``arr`` (mutated in place, then restored).

    Returns ``(grad, valid)``; ``valid`` is False where a decision flipped.
    """
    grad = np.zeros(arr.shape)
    valid = np.zeros(arr.shape, dtype=bool)
    with T.record_decisions() as base:
        fn()
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        with T.record_decisions() as up:
            f_up = fn()
        flat[i] = orig - h
        with T.record_decisions() as down:
            f_down = fn()
        flat[i] = orig
        grad.flat[i] = (f_up - f_down) / (2.0 * h)
        valid.flat[i] = _same_decisions(base, up) and _same_decisions(base, down)
    return grad, valid


def relative_error(analytic: np.ndarray, numeric: np.ndarray, valid=None) -> float:
    """max |a - n| / max(max |a|, max |n|) over the valid entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if valid is not None:
        a, n = a[valid], n[valid]
    if a.size == 0:
        return float("nan")
    denom = max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return float(np.abs(a - n).max() / denom)


def check(name: str, build: Callable[[dict], T.Tensor], arrays: dict, wrt: str,
          tolerance: float, coords=None) -> CheckResult:
    """Compare tape and finite-difference gradients of ``build(tensors)`` w.r.t. ``arrays[wrt]``.

    ``build`` receives a name -> Tensor map and returns a scalar Tensor.
    """
    target = arrays[wrt]
    tensors = {k: T.Tensor(v, requires_grad=(k == wrt)) for k, v in arrays.items()}
    # the tensor wraps the same buffer, so FD perturbations are seen by build()
    tensors[wrt].data = target
    with T.Tape() as tape:
        out = build(tensors)
        tape.backward(out)
    analytic = tensors[wrt].grad
    if analytic is None:
        analytic = np.zeros(target.shape)

    def fn():
        with T.no_grad():
            return build(tensors).data.item()

    numeric, valid = numerical_gradient(fn, target, coords=coords)
    if coords is not None:
        picked = np.zeros(target.shape, dtype=bool)
        picked.flat[list(coords)] = True
        valid &= picked
        skipped = len(coords) - int(valid.sum())
    else:
        skipped = int((~valid).sum())
    return CheckResult(name, relative_error(analytic, numeric, valid), tolerance,
                       int(valid.sum()), skipped)


def _weighted(t: T.Tensor, w: np.ndarray) -> T.Tensor:
    # random projection so every output element matters
    return T.sum_all(T.mul(t, T.Tensor(w)))


def run_suite(seed: int = 0) -> list[CheckResult]:
    """All finite-difference checks on tiny shapes (deterministic per seed)."""
    rng = np.random.default_rng(seed)
    prim, composite = 1e-5, 1e-4
    results = []

    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    w = rng.normal(size=(1, 3, 5, 5))
    conv = lambda t: _weighted(T.conv2d(t["x"], t["k"], t["b"]), w)
    arrays = {"x": x, "k": k, "b": b}
    results.append(check("conv2d/input", conv, arrays, "x", prim))
    results.append(check("conv2d/kernel", conv, arrays, "k", prim))
    results.append(check("conv2d/bias", conv, arrays, "b", prim))

    x = rng.normal(size=(2, 3, 3, 2))
    k = rng.normal(size=(3, 2, 2, 2))
    b = rng.normal(size=(2,))
    w = rng.normal(size=(2, 2, 6, 4))
    convt = lambda t: _weighted(T.conv_transpose2d(t["x"], t["k"], t["b"]), w)
    arrays = {"x": x, "k": k, "b": b}
    results.append(check("conv_transpose2d/input", convt, arrays, "x", prim))
    results.append(check("conv_transpose2d/kernel", convt, arrays, "k", prim))
    results.append(check("conv_transpose2d/bias", convt, arrays, "b", prim))

    x = rng.normal(size=(2, 2, 4, 6))
    w = rng.normal(size=(2, 2, 2, 3))
    results.append(check("maxpool2x2", lambda t: _weighted(T.maxpool2x2(t["x"])[0], w),
                         {"x": x}, "x", prim))

    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 3, 4))
    results.append(check("relu", lambda t: _weighted(T.relu(t["x"]), w), {"x": x}, "x", prim))
    results.append(check("sigmoid", lambda t: _weighted(T.sigmoid(t["x"]), w), {"x": x}, "x", prim))

    x = rng.normal(size=(1, 2, 7, 6))
    w = rng.normal(size=(1, 2, 7, 6))
    for sigma in (0.5, 2.0):
        results.append(check(f"gaussian_blur2d/sigma={sigma}",
                             lambda t, s=sigma: _weighted(T.gaussian_blur2d(t["x"], s), w),
                             {"x": x}, "x", prim))

    x = rng.normal(size=(3, 2, 4))
    idx = rng.integers(0, 3, size=(2, 4))
    w = rng.normal(size=(2, 4))
    results.append(check("gather", lambda t: _weighted(T.gather(t["x"], idx), w), {"x": x}, "x", prim))

    a = rng.normal(size=(1, 2, 3, 3))
    c = rng.normal(size=(1, 3, 3, 3))
    w = rng.normal(size=(1, 5, 3, 3))
    results.append(check("concat_channels", lambda t: _weighted(T.concat_channels([t["a"], t["c"]]), w),
                         {"a": a, "c": c}, "a", prim))

    x = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(1, 2, 8, 8))
    for variant in Variant:
        fc = FusionConfig(variant=variant)
        results.append(check(f"fusion_block/{variant.value}",
                             lambda t, fc=fc: _weighted(fusion_block(t["x"], fc), w),
                             {"x": x}, "x", composite))

    results.extend(_loss_checks(rng, 1e-6))
    results.append(_network_check(seed, composite))
    return results


def _loss_checks(rng, tol):
    z = rng.normal(size=(2, 3, 4, 4))
    pred = 1.0 / (1.0 + np.exp(-z))
    onehot = (rng.random(size=(2, 3, 4, 4)) < 0.4).astype(np.float64)
    mask = np.array([[True, False, True], [True, True, False]])
    cfg = LossConfig()
    out = []
    arrays = {"p": pred}
    out.append(check("masked_bce", lambda t: masked_bce(t["p"], onehot, mask), arrays, "p", tol))
    out.append(check("joint_dice_loss", lambda t: joint_dice_loss(t["p"], onehot, mask, cfg.epsilon),
                     arrays, "p", tol))
    out.append(check("total_loss", lambda t: total_loss(t["p"], onehot, mask, cfg), arrays, "p", tol))
    return out


def _network_check(seed, tol, n_coords=None):
    cfg = NetworkConfig(in_channels=1, base_channels=2, depth=1, num_classes=2)
    ck = init_parameters(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(2, 1, 8, 8))
    onehot = (rng.random(size=(2, 2, 8, 8)) < 0.5).astype(np.float64)
    mask = np.array([[True, True], [True, False]])
    lcfg = LossConfig()
    names = list(ck.parameters)
    # flatten all parameters into one vector so a single FD loop covers them
    sizes = [ck.parameters[n].size for n in names]
    flat = np.concatenate([ck.parameters[n].ravel() for n in names])
    views, off = {}, 0
    for n, s in zip(names, sizes):
        views[n] = flat[off:off + s].reshape(ck.parameters[n].shape)
        off += s

    # analytic gradient over all parameters via the tape
    params = as_tensors(views, requires_grad=True)
    for n in names:
        params[n].data = views[n]
    with T.Tape() as tape:
        loss = total_loss(forward(x, params, cfg), onehot, mask, lcfg)
        tape.backward(loss)
    analytic = np.concatenate([(params[n].grad if params[n].grad is not None
                                else np.zeros(views[n].shape)).ravel() for n in names])

    def fn():
        with T.no_grad():
            return total_loss(forward(x, views, cfg), onehot, mask, lcfg).data.item()

    n = flat.size if n_coords is None else min(n_coords, flat.size)
    coords = sorted(np.random.default_rng(seed + 2).choice(flat.size, size=n,
                                                            replace=False).tolist())
    numeric, valid = numerical_gradient(fn, flat, coords=coords)
    picked = np.zeros(flat.shape, dtype=bool)
    picked[coords] = True
    valid &= picked
    return CheckResult("network/total_loss", relative_error(analytic, numeric, valid), tol,
                       int(valid.sum()), len(coords) - int(valid.sum()))


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<34} worst rel err {r.rel_error:.3e}  "
                     f"(tol {r.tolerance:.0e}, {r.checked} pts, {r.skipped} skipped)")
    return "\n".join(lines)
