"""Pure-numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``;
``dgc.kernels`` picks one set at import.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def conv1d_cols(h, k, stride):
    """im2col for a valid strided 1D conv on channels-last input.

    h: (n, L, C) -> (n * Lo, k * C) with column order (tap, channel).
    """
    h = np.ascontiguousarray(h)
    n, length, c = h.shape
    lo = (length - k) // stride + 1
    sn, sl, sc = h.strides
    win = as_strided(h, shape=(n, lo, k, c), strides=(sn, stride * sl, sl, sc), writeable=False)
    return win.reshape(n * lo, k * c)


def conv1d_col2im(dcols, n, length, k, stride):
    """Adjoint of conv1d_cols: scatter-add column gradients back to (n, L, C)."""
    c = dcols.shape[1] // k
    lo = dcols.shape[0] // n
    d = dcols.reshape(n, lo, k, c)
    out = np.zeros((n, length, c), dtype=dcols.dtype)
    span = stride * (lo - 1) + 1
    for j in range(k):
        out[:, j:j + span:stride, :] += d[:, :, j, :]
    return out


def conv2d_cols(x):
    """im2col for a 3x3 same-padded conv. x: (B, H, W, C) -> (B*H*W, 9*C), order (dy, dx, c)."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    sb, sh, sw, sc = xp.strides
    win = as_strided(xp, shape=(b, h, w, 3, 3, c), strides=(sb, sh, sw, sh, sw, sc), writeable=False)
    return win.reshape(b * h * w, 9 * c)


def conv2d_col2im(dcols, b, h, w):
    """Adjoint of conv2d_cols."""
    c = dcols.shape[1] // 9
    d = dcols.reshape(b, h, w, 3, 3, c)
    out = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            out[:, dy:dy + h, dx:dx + w, :] += d[:, :, :, dy, dx, :]
    return out[:, 1:-1, 1:-1, :]


def balanced_assign(order, n_pixels, k):
    """Greedy capacity-limited labelling.

    ``order`` lists flat (pixel * k + cluster) pair ids, best first. Each cluster
    takes at most ceil(M/K) pixels, and only M mod K clusters may exceed floor(M/K),
    so every cluster ends with floor or ceil of M/K.
    """
    base, extra = divmod(n_pixels, k)
    labels = np.full(n_pixels, -1, dtype=np.int64)
    counts = [0] * k
    left = n_pixels
    for pair in order.tolist():
        i, c = divmod(pair, k)
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
    return labels


def gaussian_affinity(z, inv_two_h2):
    """Kernel matrix w_ij = exp(-|z_i - z_j|^2 / (2 h^2)) of one patch and its row sums.

    z: (N, d). Returns (w, r) with w (N, N), r (N,).
    """
    sq = np.einsum("ij,ij->i", z, z)
    d2 = z @ np.ascontiguousarray(z.T)
    d2 *= -2.0
    d2 += sq[:, None]
    d2 += sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    d2 *= -inv_two_h2
    w = np.exp(d2, out=d2)
    return w, w.sum(axis=1)


def affinity_grad(m, w, dr, inv_two_h2):
    """Symmetrised gradient w.r.t. squared distances, in place of ``m``.

    On entry m = da @ z^T, the part of dL/dw that varies along rows. Returns
    (gs, row sums of gs) where gs = G + G^T and G = (m + dr[:, None]) * w * (-inv).
    """
    m += dr[:, None]
    m *= w
    m *= -inv_two_h2
    gs = m + m.T
    return gs, gs.sum(axis=1)
