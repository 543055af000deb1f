"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Forward kernels reproduce the compiled loops bit for bit (same tap order,
same comparisons). Backward scatters may differ in the last ulp because
they accumulate in a different order.
"""
import numpy as np


def im2col(x, kh, kw, ph, pw):
    B, C, H, W = x.shape
    Ho = H + 2 * ph - kh + 1
    Wo = W + 2 * pw - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + Ho, j:j + Wo]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, ph, pw):
    B = cols.shape[0]
    Ho = H + 2 * ph - kh + 1
    Wo = W + 2 * pw - kw + 1
    c6 = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + Ho, j:j + Wo] += c6[:, :, i, j]
    return np.ascontiguousarray(out[:, :, ph:ph + H, pw:pw + W])


def _windows(x):
    B, C, H, W = x.shape
    return (x.reshape(B, C, H // 2, 2, W // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(B, C, H // 2, W // 2, 4))


def maxpool2x2_forward(x):
    win = _windows(x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.intp)


def maxpool2x2_backward(g, idx):
    B, C, Ho, Wo = g.shape
    win = np.zeros((B, C, Ho, Wo, 4), dtype=np.float64)
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    out = (win.reshape(B, C, Ho, Wo, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, 2 * Ho, 2 * Wo))
    return np.ascontiguousarray(out)


def select_similar(stack, closest_pair):
    v0, v1, v2 = stack[0], stack[1], stack[2]
    d01 = np.abs(v0 - v1)
    d02 = np.abs(v0 - v2)
    d12 = np.abs(v1 - v2)
    if closest_pair:
        first01 = (d01 <= d02) & (d01 <= d12)
        first02 = ~first01 & (d02 <= d12)
        ia = np.where(first01 | first02, 0, 1).astype(np.intp)
        ib = np.where(first01, 1, 2).astype(np.intp)
        val = np.where(first01, 0.5 * v0 + 0.5 * v1,
                       np.where(first02, 0.5 * v0 + 0.5 * v2, 0.5 * v1 + 0.5 * v2))
        return val, ia, ib
    s0 = d01 + d02
    s1 = d01 + d12
    s2 = d02 + d12
    pick0 = (s0 <= s1) & (s0 <= s2)
    pick1 = ~pick0 & (s1 <= s2)
    ia = np.where(pick0, 0, np.where(pick1, 1, 2)).astype(np.intp)
    val = np.where(pick0, v0, np.where(pick1, v1, v2))
    return val, ia, ia.copy()


def _operator(taps, w, n):
    # dense (n_out, n_in) matrix of a tap-gather filter
    m = np.zeros((taps.shape[0], n), dtype=np.float64)
    rows = np.arange(taps.shape[0])
    for t in range(w.shape[0]):
        np.add.at(m, (rows, taps[:, t]), w[t])
    return m


def blur_last(x, taps, w):
    out = np.zeros_like(x)
    for t in range(w.shape[0]):
        out += w[t] * (x[:, :, taps[:, t]] - x)
    return x + out


def blur_last_backward(g, taps, w):
    return np.ascontiguousarray(g @ _operator(taps, w, g.shape[2]))


def blur_mid(x, taps, w):
    out = np.zeros_like(x)
    for t in range(w.shape[0]):
        out += w[t] * (x[:, taps[:, t], :] - x)
    return x + out


def blur_mid_backward(g, taps, w):
    m = _operator(taps, w, g.shape[1])
    return np.ascontiguousarray(np.einsum("ij,pik->pjk", m, g))
