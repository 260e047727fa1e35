"""Differentiable layer operations over :class:`~densecat.tensor.Tensor`.

Every op computes its forward pass with numpy and returns a tensor whose
backward closure is recorded on the active tape.  Convolutions are
cross-correlations with zero padding; layer norm normalizes over channels at
each spatial position.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import kernels
from .tensor import Tensor, result

ACTIVATIONS = ("relu", "gelu", "silu")
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _pad_hw(a: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, kh, kw)."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# -- convolution ----------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    _check(x.data.ndim == 4, f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    _check(w.data.ndim == 4, f"conv2d weight must be 4-D, got shape {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_g, kh, kw = w.shape
    _check(stride >= 1 and pad >= 0 and groups >= 1, "stride/groups must be >= 1 and pad >= 0")
    _check(cin % groups == 0, f"input channels {cin} not divisible by groups {groups}")
    _check(cout % groups == 0, f"output channels {cout} not divisible by groups {groups}")
    _check(cin // groups == cin_g,
           f"weight in-channels {cin_g} != input channels {cin} / groups {groups}")
    _check(h + 2 * pad >= kh, f"kernel height {kh} exceeds padded input height {h + 2 * pad}")
    _check(wid + 2 * pad >= kw, f"kernel width {kw} exceeds padded input width {wid + 2 * pad}")
    if b is not None:
        _check(b.shape == (cout,), f"bias shape {b.shape} != ({cout},)")

    ho, wo = _out_size(h, kh, stride, pad), _out_size(wid, kw, stride, pad)
    xd, wd = x.data, w.data
    if groups == cin and cin_g == 1 and cout == cin:
        out, grad_fn = _depthwise(xd, wd, stride, pad, ho, wo)
    else:
        out, grad_fn = _grouped(xd, wd, stride, pad, groups, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gx, gw = grad_fn(g)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return result(out, parents, backward, "conv2d")


def _grouped(xd, wd, stride, pad, groups, ho, wo):
    n, cin, h, wid = xd.shape
    cout, cin_g, kh, kw = wd.shape
    cout_g = cout // groups
    k = cin_g * kh * kw
    cols_len = n * ho * wo
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    # columns laid out (groups, k, N*Ho*Wo) so each group is a single GEMM
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(groups, k, cols_len)
    else:
        win = _windows(_pad_hw(xd, pad), kh, kw, stride, ho, wo)
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(groups, k, cols_len)
    wmat = wd.reshape(groups, cout_g, k)
    out = np.matmul(wmat, cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gg = g.transpose(1, 0, 2, 3).reshape(groups, cout_g, cols_len)
        gw = np.matmul(gg, cols.transpose(0, 2, 1)).reshape(wd.shape)
        gcols = np.matmul(wmat.transpose(0, 2, 1), gg)
        if pointwise:
            return np.ascontiguousarray(gcols.reshape(cin, n, h, wid).transpose(1, 0, 2, 3)), gw
        gcols = gcols.reshape(cin, kh, kw, n, ho, wo)
        gxp = np.zeros((cin, n, h + 2 * pad, wid + 2 * pad), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wid].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw

    return out, grad_fn


def _depthwise(xd, wd, stride, pad, ho, wo):
    h, wid = xd.shape[2:]
    xp = np.ascontiguousarray(_pad_hw(xd, pad))
    wk = np.ascontiguousarray(wd[:, 0])
    out = kernels.depthwise_forward(xp, wk, stride, ho, wo)

    def grad_fn(g):
        gxp, gw = kernels.depthwise_backward(xp, wk, np.ascontiguousarray(g), stride)
        return gxp[:, :, pad : pad + h, pad : pad + wid], gw.reshape(wd.shape)

    return out, grad_fn


# -- structural ops ---------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    _check(len(xs) > 0, "concat_channels needs at least one input")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for i, t in enumerate(xs):
        _check(t.data.ndim == 4, f"concat input {i} must be 4-D, got {t.shape}")
        _check(t.shape[0] == ref[0], f"concat input {i}: batch {t.shape[0]} != {ref[0]}")
        _check(t.shape[2:] == ref[2:],
               f"concat input {i}: spatial size {t.shape[2:]} != {ref[2:]}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return result(out, xs, backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check(0 <= start < stop <= x.shape[1], f"bad channel slice [{start}:{stop}] of {x.shape[1]}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return result(out, (x,), backward, "slice_channels")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(x: Tensor, y: Tensor) -> Tensor:
    _check(x.shape == y.shape, f"add: shape mismatch {x.shape} vs {y.shape}")
    return result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = x.data * y.data

    def backward(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return result(out, (x, y), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    return result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return result(np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),), "sum")


# -- normalization ----------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over channels independently at every (n, h, w) position."""
    _check(eps > 0, "layer_norm eps must be positive")
    _check(x.data.ndim == 4, f"layer_norm expects N,C,H,W input, got {x.shape}")
    c = x.shape[1]
    _check(gamma.shape == (c,) and beta.shape == (c,),
           f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gb = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gb
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, dgamma, dbeta

    return result(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float = 0.1, eps: float = 1e-5,
               mode: str = "train") -> Tensor:
    """Per-channel normalization over (N, H, W).

    In train mode the running statistics arrays are updated in place, using the
    unbiased batch variance.
    """
    _check(eps > 0, "batch_norm eps must be positive")
    _check(mode in ("train", "eval"), f"unknown batch_norm mode {mode!r}")
    _check(x.data.ndim == 4, f"batch_norm expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    gb = gamma.data.reshape(1, c, 1, 1)
    xd = x.data
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv
        out = (xhat * gb + beta.data.reshape(1, c, 1, 1)).astype(xd.dtype, copy=False)

        def backward_eval(g):
            return g * gb * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return result(out, (x, gamma, beta), backward_eval, "batch_norm")

    _check(n >= 2, f"batch_norm in train mode needs batch size >= 2, got {n}")
    m = n * h * w
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)
    unbiased = var.reshape(c) * (m / max(m - 1, 1))
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def backward(g):
        dxhat = g * gb
        dx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return result(out, (x, gamma, beta), backward, "batch_norm")


# -- elementwise -------------------------------------------------------------------

def activation(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return result(xd * mask, (x,), lambda g: (g * mask,), "relu")
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
        out = xd * cdf

        def backward(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)

        return result(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")
    if kind == "silu":
        sig = _sigmoid(xd)
        out = xd * sig
        return result(out, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), "silu")
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# -- pooling -----------------------------------------------------------------------

def pool(x: Tensor, kind: str, k: int = 2, stride: int = 2, pad: int = 0) -> Tensor:
    """avg / max pooling with a square window, or ``global_avg`` to N x C x 1 x 1.

    Average pooling counts zero padding in the divisor.
    """
    _check(x.data.ndim == 4, f"pool expects N,C,H,W input, got {x.shape}")
    xd = x.data
    n, c, h, w = xd.shape
    if kind == "global_avg":
        out = xd.mean(axis=(2, 3), keepdims=True)
        area = h * w
        return result(out, (x,),
                      lambda g: (np.broadcast_to(g / area, xd.shape).astype(xd.dtype),),
                      "global_avg")
    _check(kind in ("avg", "max"), f"unknown pool kind {kind!r}")
    _check(stride >= 1, "pool stride must be >= 1")
    _check(k <= h + 2 * pad and k <= w + 2 * pad,
           f"pool kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = _pad_hw(xd, pad, -np.inf if kind == "max" else 0.0)
    win = _windows(xp, k, k, stride, ho, wo)

    def scatter(parts):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += parts(i, j)
        return gxp[:, :, pad : pad + h, pad : pad + w]

    if kind == "avg":
        out = win.mean(axis=(4, 5))
        inv = 1.0 / (k * k)
        return result(out, (x,), lambda g: (scatter(lambda i, j: g * inv),), "avg_pool")

    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return result(out, (x,), lambda g: (scatter(lambda i, j: g * (arg == i * k + j)),),
                  "max_pool")


# -- dense layers ------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b with x of shape (N, D) and w of shape (D, K)."""
    _check(x.data.ndim == 2 and w.data.ndim == 2,
           f"linear expects 2-D input and weight, got {x.shape} and {w.shape}")
    _check(x.shape[1] == w.shape[0], f"linear: input dim {x.shape[1]} != weight rows {w.shape[0]}")
    if b is not None:
        _check(b.shape == (w.shape[1],), f"linear bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, (g.sum(axis=0) if b is not None else None)

    return result(out, (x, w) if b is None else (x, w, b), backward, "linear")


def channel_rescale(x: Tensor, gamma: Tensor, se_weight: Tensor, se_bias: Tensor) -> Tensor:
    """x * gamma * sigmoid(se_weight @ mean_hw(x) + se_bias), per channel."""
    _check(x.data.ndim == 4, f"channel_rescale expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    _check(gamma.shape == (c,), f"gamma shape {gamma.shape} != ({c},)")
    _check(se_weight.shape == (c, c), f"se_weight shape {se_weight.shape} != ({c}, {c})")
    _check(se_bias.shape == (c,), f"se_bias shape {se_bias.shape} != ({c},)")
    xd = x.data
    pooled = xd.mean(axis=(2, 3))
    gate = _sigmoid(pooled @ se_weight.data.T + se_bias.data)
    factor = gamma.data[None, :] * gate
    out = xd * factor[:, :, None, None]

    def backward(g):
        gfactor = (g * xd).sum(axis=(2, 3))
        ggamma = (gfactor * gate).sum(axis=0)
        gz = gfactor * gamma.data[None, :] * gate * (1.0 - gate)
        gw = gz.T @ pooled
        gbias = gz.sum(axis=0)
        gpooled = gz @ se_weight.data
        gx = g * factor[:, :, None, None] + (gpooled / (h * w))[:, :, None, None]
        return gx, ggamma, gw, gbias

    return result(out, (x, gamma, se_weight, se_bias), backward, "channel_rescale")


def stochastic_depth(x: Tensor, rate: float, mode: str = "train",
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-sample drop of a branch: zero with probability ``rate``, else scale by 1/(1-rate).

    Returns ``x`` itself in eval mode or at rate 0, consuming no randomness.
    """
    _check(0.0 <= rate < 1.0, f"stochastic depth rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    _check(rng is not None, "train-mode stochastic depth needs an rng")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype) / (1.0 - rate)
    mask = keep.reshape((x.shape[0],) + (1,) * (x.data.ndim - 1))
    return result(x.data * mask, (x,), lambda g: (g * mask,), "stochastic_depth")


# -- loss ------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross entropy against soft targets, with uniform label smoothing."""
    _check(logits.data.ndim == 2, f"logits must be (N, K), got {logits.shape}")
    _check(0.0 <= label_smoothing < 1.0, f"label_smoothing must be in [0, 1), got {label_smoothing}")
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    _check(t.shape == logits.shape, f"targets shape {t.shape} != logits shape {logits.shape}")
    row_sums = t.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-5)
    if bad.size:
        raise ValueError(f"target row {int(bad[0])} sums to {float(row_sums[bad[0]])}, not 1")
    n, k = logits.shape
    t = t.astype(np.float64)
    if label_smoothing:
        t = (1.0 - label_smoothing) * t + label_smoothing / k
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -(t * logp).sum() / n
    dtype = logits.data.dtype

    def backward(g):
        return ((np.exp(logp) - t) * (float(np.asarray(g).reshape(-1)[0]) / n)).astype(dtype),

    return result(np.asarray(loss, dtype=dtype), (logits,), backward, "softmax_cross_entropy")
