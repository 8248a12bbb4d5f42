"""JIT-compiled inner loops.

Strided numpy slicing is memory-bound on these small maps; plain loop nests
compiled by numba are several times faster on one core.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def dw_forward(xp, w, stride, ho):
    """``xp`` is the zero-padded input (N, C, H+2p, W+2p), ``w`` is (C, K, K)."""
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((n, c, ho, ho))
    for a in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    wv = w[ch, i, j]
                    for p in range(ho):
                        for q in range(ho):
                            out[a, ch, p, q] += xp[a, ch, p * stride + i, q * stride + j] * wv
    return out


@njit(cache=True)
def dw_backward(xp, w, stride, g, need_dx):
    """Gradients w.r.t. the padded input and the kernel."""
    n, c, ho = g.shape[0], g.shape[1], g.shape[2]
    k = w.shape[1]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else np.zeros((1, 1, 1, 1))
    for a in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    acc = 0.0
                    wv = w[ch, i, j]
                    for p in range(ho):
                        for q in range(ho):
                            gv = g[a, ch, p, q]
                            acc += xp[a, ch, p * stride + i, q * stride + j] * gv
                            if need_dx:
                                dxp[a, ch, p * stride + i, q * stride + j] += wv * gv
                    dw[ch, i, j] += acc
    return dxp, dw


@njit(cache=True)
def fake_quant(x, lo, hi, scale):
    """Clamp to [lo, hi], snap to multiples of ``scale`` (halves away from
    zero). Returns the snapped values and the not-saturated mask."""
    flat = x.ravel()
    q = np.empty(flat.size)
    mask = np.empty(flat.size, dtype=np.bool_)
    for i in range(flat.size):
        v = flat[i]
        mask[i] = lo <= v <= hi
        v = min(max(v, lo), hi)
        r = v / scale
        t = math.floor(abs(r) + 0.5)
        q[i] = (t if r >= 0 else -t) * scale
    return q.reshape(x.shape), mask.reshape(x.shape)
