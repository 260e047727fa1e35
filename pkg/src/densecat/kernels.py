"""Compiled loops for depthwise convolution, which has no efficient GEMM form.

Loop order is fixed, so results are bit-reproducible run to run.
"""

import numpy as np
from numba import njit

_FLAGS = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FLAGS)
def _dw_fwd(xp, w, stride, ho, wo, out):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    for b in range(n):
        for ch in range(c):
            x2 = xp[b, ch]
            o2 = out[b, ch]
            w2 = w[ch]
            for i in range(ho):
                orow = o2[i]
                for p in range(kh):
                    xrow = x2[i * stride + p]
                    for q in range(kw):
                        wv = w2[p, q]
                        if stride == 1:
                            for j in range(wo):
                                orow[j] += wv * xrow[j + q]
                        else:
                            for j in range(wo):
                                orow[j] += wv * xrow[j * stride + q]


@njit(cache=True, fastmath=_FLAGS)
def _dw_bwd(xp, w, g, stride, gxp, gw):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    for b in range(n):
        for ch in range(c):
            x2 = xp[b, ch]
            gx2 = gxp[b, ch]
            g2 = g[b, ch]
            w2 = w[ch]
            gw2 = gw[ch]
            for i in range(ho):
                grow = g2[i]
                for p in range(kh):
                    r = i * stride + p
                    xrow = x2[r]
                    gxrow = gx2[r]
                    for q in range(kw):
                        wv = w2[p, q]
                        acc = grow[0] * 0
                        if stride == 1:
                            for j in range(wo):
                                acc += grow[j] * xrow[j + q]
                                gxrow[j + q] += grow[j] * wv
                        else:
                            for j in range(wo):
                                acc += grow[j] * xrow[j * stride + q]
                                gxrow[j * stride + q] += grow[j] * wv
                        gw2[p, q] += acc


def depthwise_forward(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """xp: zero-padded input (N, C, Hp, Wp); w: (C, kh, kw)."""
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    _dw_fwd(xp, w.astype(xp.dtype, copy=False), stride, ho, wo, out)
    return out


def depthwise_backward(xp: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int):
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=xp.dtype)
    _dw_bwd(xp, w.astype(xp.dtype, copy=False), g.astype(xp.dtype, copy=False), stride, gxp, gw)
    return gxp, gw
