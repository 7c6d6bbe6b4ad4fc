# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py`` (same signatures, same results)."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef fused real:
    float
    double


def _conv1d_cols(real[:, :, ::1] h, Py_ssize_t k, Py_ssize_t stride, real[:, ::1] out):
    cdef Py_ssize_t n = h.shape[0], length = h.shape[1], c = h.shape[2]
    cdef Py_ssize_t lo = (length - k) // stride + 1
    cdef Py_ssize_t i, t, row, nbytes = k * c * sizeof(real)
    with nogil:
        for i in range(n):
            for t in range(lo):
                row = i * lo + t
                memcpy(&out[row, 0], &h[i, t * stride, 0], nbytes)


def conv1d_cols(h, k, stride):
    h = np.ascontiguousarray(h)
    n, length, c = h.shape
    lo = (length - k) // stride + 1
    out = np.empty((n * lo, k * c), dtype=h.dtype)
    _conv1d_cols(h, k, stride, out)
    return out


def _conv1d_col2im(real[:, ::1] d, Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, real[:, :, ::1] out):
    cdef Py_ssize_t c = out.shape[2]
    cdef Py_ssize_t lo = d.shape[0] // n
    cdef Py_ssize_t i, t, j, ch, row
    cdef real* src
    cdef real* dst
    with nogil:
        for i in range(n):
            for t in range(lo):
                row = i * lo + t
                for j in range(k):
                    src = &d[row, j * c]
                    dst = &out[i, t * stride + j, 0]
                    for ch in range(c):
                        dst[ch] += src[ch]


def conv1d_col2im(dcols, n, length, k, stride):
    dcols = np.ascontiguousarray(dcols)
    c = dcols.shape[1] // k
    out = np.zeros((n, length, c), dtype=dcols.dtype)
    _conv1d_col2im(dcols, n, k, stride, out)
    return out


def _conv2d_cols(real[:, :, :, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t i, y, xx, dy, dx, sy, sx, row
    cdef Py_ssize_t nbytes = c * sizeof(real)
    with nogil:
        for i in range(b):
            for y in range(h):
                for xx in range(w):
                    row = (i * h + y) * w + xx
                    for dy in range(3):
                        sy = y + dy - 1
                        for dx in range(3):
                            sx = xx + dx - 1
                            if 0 <= sy < h and 0 <= sx < w:
                                memcpy(&out[row, (dy * 3 + dx) * c], &x[i, sy, sx, 0], nbytes)
                            else:
                                memset(&out[row, (dy * 3 + dx) * c], 0, nbytes)


def conv2d_cols(x):
    x = np.ascontiguousarray(x)
    b, h, w, c = x.shape
    out = np.empty((b * h * w, 9 * c), dtype=x.dtype)
    _conv2d_cols(x, out)
    return out


def _conv2d_col2im(real[:, ::1] d, real[:, :, :, ::1] out):
    cdef Py_ssize_t b = out.shape[0], h = out.shape[1], w = out.shape[2], c = out.shape[3]
    cdef Py_ssize_t i, y, xx, dy, dx, sy, sx, row, ch
    cdef real* src
    cdef real* dst
    with nogil:
        for i in range(b):
            for y in range(h):
                for xx in range(w):
                    row = (i * h + y) * w + xx
                    for dy in range(3):
                        sy = y + dy - 1
                        if sy < 0 or sy >= h:
                            continue
                        for dx in range(3):
                            sx = xx + dx - 1
                            if sx < 0 or sx >= w:
                                continue
                            src = &d[row, (dy * 3 + dx) * c]
                            dst = &out[i, sy, sx, 0]
                            for ch in range(c):
                                dst[ch] += src[ch]


def conv2d_col2im(dcols, b, h, w):
    dcols = np.ascontiguousarray(dcols)
    c = dcols.shape[1] // 9
    out = np.zeros((b, h, w, c), dtype=dcols.dtype)
    _conv2d_col2im(dcols, out)
    return out


def balanced_assign(cnp.int64_t[::1] order, Py_ssize_t n_pixels, Py_ssize_t k):
    cdef Py_ssize_t base = n_pixels // k
    cdef Py_ssize_t extra = n_pixels % k
    labels_arr = np.full(n_pixels, -1, dtype=np.int64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef Py_ssize_t left = n_pixels, idx, pair, i, c, cnt
    with nogil:
        for idx in range(order.shape[0]):
            pair = order[idx]
            i = pair // k
            c = pair - i * k
            if labels[i] >= 0:
                continue
            cnt = counts[c]
            if cnt < base:
                pass
            elif cnt == base and extra > 0:
                extra -= 1
            else:
                continue
            counts[c] = cnt + 1
            labels[i] = c
            left -= 1
            if left == 0:
                break
    return labels_arr


def _affinity_logits(real[:, ::1] g, real[::1] sq, real inv):
    # g holds z z^T on entry; becomes -inv * max(d2, 0)
    cdef Py_ssize_t n = g.shape[0], i, j
    cdef real d2, si
    cdef real* row
    with nogil:
        for i in range(n):
            row = &g[i, 0]
            si = sq[i]
            for j in range(n):
                d2 = si + sq[j] - 2 * row[j]
                row[j] = -inv * d2 if d2 > 0 else 0


def gaussian_affinity(z, inv_two_h2):
    z = np.ascontiguousarray(z)
    sq = np.einsum("ij,ij->i", z, z)
    g = z @ np.ascontiguousarray(z.T)
    _affinity_logits(g, sq, inv_two_h2)
    # numpy's exp is SIMD-vectorised; a scalar libm loop is ~3x slower
    np.exp(g, out=g)
    return g, g.sum(axis=1)


def _affinity_grad(real[:, ::1] m, real[:, ::1] w, real[::1] dr, real inv, real[::1] rows):
    cdef Py_ssize_t n = m.shape[0], i, j
    cdef real a, b
    with nogil:
        for i in range(n):
            for j in range(n):
                m[i, j] = (m[i, j] + dr[i]) * w[i, j] * (-inv)
        for i in range(n):
            rows[i] = 0
        for i in range(n):
            m[i, i] = 2 * m[i, i]
            rows[i] += m[i, i]
            for j in range(i + 1, n):
                a = m[i, j] + m[j, i]
                m[i, j] = a
                m[j, i] = a
                rows[i] += a
                rows[j] += a


def affinity_grad(m, w, dr, inv_two_h2):
    rows = np.empty(m.shape[0], dtype=m.dtype)
    _affinity_grad(m, w, np.ascontiguousarray(dr, dtype=m.dtype), inv_two_h2, rows)
    return m, rows
