"""Compiled single-pass loops for the memory-bound parts of the conv stack."""
import numba
import numpy as np


@numba.njit(cache=True)
def leaky_forward(x, slope):
    out = np.empty_like(x)
    xf = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.size):
        v = xf[i]
        of[i] = v if v > 0 else v * slope
    return out


@numba.njit(cache=True)
def leaky_backward(x, g, slope):
    out = np.empty_like(g)
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.size):
        of[i] = gf[i] if xf[i] > 0 else gf[i] * slope
    return out


@numba.njit(cache=True)
def col2im_nhwc(dcols, hp, wp, stride):
    """Scatter-add (N, Ho, Wo, k, k, C) window gradients into a (N, Hp, Wp, C) buffer."""
    n, ho, wo, k, _, c = dcols.shape
    out = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                for i in range(k):
                    for j in range(k):
                        row = out[b, y * stride + i, x * stride + j]
                        src = dcols[b, y, x, i, j]
                        for ch in range(c):
                            row[ch] += src[ch]
    return out
