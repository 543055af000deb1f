# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor engine.

The blur passes compute ``x + sum_t w_t (x_tap - x)`` rather than
``sum_t w_t x_tap``: identical for normalized weights, but constants come
back bit-exact.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature and semantics; ``mmisnet.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H + 2 * ph - kh + 1
    cdef Py_ssize_t Wo = W + 2 * pw - kw + 1
    out_arr = np.zeros((B, C * kh * kw, Ho * Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(Ho):
                            iy = oy + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(Wo):
                                ix = ox + j - pw
                                if ix < 0 or ix >= W:
                                    continue
                                out[b, row, oy * Wo + ox] = x[b, c, iy, ix]
    return out_arr


def col2im(const double[:, :, ::1] cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Ho = H + 2 * ph - kh + 1
    cdef Py_ssize_t Wo = W + 2 * pw - kw + 1
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(Ho):
                            iy = oy + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(Wo):
                                ix = ox + j - pw
                                if ix < 0 or ix >= W:
                                    continue
                                out[b, c, iy, ix] += cols[b, row, oy * Wo + ox]
    return out_arr


def maxpool2x2_forward(const double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // 2, Wo = W // 2
    out_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.intp)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, oy, ox, k, best_k
    cdef double v, best
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        best = x[b, c, 2 * oy, 2 * ox]
                        best_k = 0
                        for k in range(1, 4):
                            v = x[b, c, 2 * oy + k // 2, 2 * ox + k % 2]
                            if v > best:
                                best = v
                                best_k = k
                        out[b, c, oy, ox] = best
                        idx[b, c, oy, ox] = best_k
    return out_arr, idx_arr


def maxpool2x2_backward(const double[:, :, :, ::1] g, const Py_ssize_t[:, :, :, ::1] idx):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    out_arr = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oy, ox, k
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        k = idx[b, c, oy, ox]
                        out[b, c, 2 * oy + k // 2, 2 * ox + k % 2] = g[b, c, oy, ox]
    return out_arr


def select_similar(const double[:, ::1] stack, bint closest_pair):
    """Per-column pick from a (3, N) stack.

    Returns ``(values, first, second)``; for single selection both index
    arrays are the winner.
    """
    cdef Py_ssize_t N = stack.shape[1]
    val_arr = np.empty(N, dtype=np.float64)
    a_arr = np.empty(N, dtype=np.intp)
    b_arr = np.empty(N, dtype=np.intp)
    cdef double[::1] val = val_arr
    cdef Py_ssize_t[::1] ia = a_arr
    cdef Py_ssize_t[::1] ib = b_arr
    cdef Py_ssize_t n
    cdef double v0, v1, v2, d01, d02, d12, s0, s1, s2
    with nogil:
        for n in range(N):
            v0 = stack[0, n]
            v1 = stack[1, n]
            v2 = stack[2, n]
            d01 = v0 - v1
            if d01 < 0:
                d01 = -d01
            d02 = v0 - v2
            if d02 < 0:
                d02 = -d02
            d12 = v1 - v2
            if d12 < 0:
                d12 = -d12
            if closest_pair:
                if d01 <= d02 and d01 <= d12:
                    ia[n] = 0
                    ib[n] = 1
                    val[n] = 0.5 * v0 + 0.5 * v1
                elif d02 <= d12:
                    ia[n] = 0
                    ib[n] = 2
                    val[n] = 0.5 * v0 + 0.5 * v2
                else:
                    ia[n] = 1
                    ib[n] = 2
                    val[n] = 0.5 * v1 + 0.5 * v2
            else:
                s0 = d01 + d02
                s1 = d01 + d12
                s2 = d02 + d12
                if s0 <= s1 and s0 <= s2:
                    ia[n] = 0
                    val[n] = v0
                elif s1 <= s2:
                    ia[n] = 1
                    val[n] = v1
                else:
                    ia[n] = 2
                    val[n] = v2
                ib[n] = ia[n]
    return val_arr, a_arr, b_arr


def blur_last(const double[:, :, ::1] x, const Py_ssize_t[:, ::1] taps, const double[::1] w):
    cdef Py_ssize_t P = x.shape[0], H = x.shape[1], W = x.shape[2], T = w.shape[0]
    out_arr = np.empty((P, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, h, j, t
    cdef double acc, centre
    with nogil:
        for p in range(P):
            for h in range(H):
                for j in range(W):
                    centre = x[p, h, j]
                    acc = 0.0
                    for t in range(T):
                        acc = acc + w[t] * (x[p, h, taps[j, t]] - centre)
                    out[p, h, j] = centre + acc
    return out_arr


def blur_last_backward(const double[:, :, ::1] g, const Py_ssize_t[:, ::1] taps, const double[::1] w):
    cdef Py_ssize_t P = g.shape[0], H = g.shape[1], W = g.shape[2], T = w.shape[0]
    out_arr = np.zeros((P, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, h, j, t
    cdef double gv
    with nogil:
        for p in range(P):
            for h in range(H):
                for j in range(W):
                    gv = g[p, h, j]
                    for t in range(T):
                        out[p, h, taps[j, t]] += w[t] * gv
    return out_arr


def blur_mid(const double[:, :, ::1] x, const Py_ssize_t[:, ::1] taps, const double[::1] w):
    cdef Py_ssize_t P = x.shape[0], H = x.shape[1], W = x.shape[2], T = w.shape[0]
    out_arr = np.zeros((P, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, i, j, t, src
    cdef double wt
    with nogil:
        for p in range(P):
            for i in range(H):
                for t in range(T):
                    src = taps[i, t]
                    wt = w[t]
                    for j in range(W):
                        out[p, i, j] += wt * (x[p, src, j] - x[p, i, j])
                for j in range(W):
                    out[p, i, j] = x[p, i, j] + out[p, i, j]
    return out_arr


def blur_mid_backward(const double[:, :, ::1] g, const Py_ssize_t[:, ::1] taps, const double[::1] w):
    cdef Py_ssize_t P = g.shape[0], H = g.shape[1], W = g.shape[2], T = w.shape[0]
    out_arr = np.zeros((P, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, i, j, t, dst
    cdef double wt
    with nogil:
        for p in range(P):
            for i in range(H):
                for t in range(T):
                    dst = taps[i, t]
                    wt = w[t]
                    for j in range(W):
                        out[p, dst, j] += wt * g[p, i, j]
    return out_arr
