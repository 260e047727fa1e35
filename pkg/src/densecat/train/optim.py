"""SGD with momentum and AdamW, operating in place on parameter arrays."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def _check_finite(arrays, names, what):
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            name = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite {what} for parameter {name}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             momentum: float, weight_decay: float, velocity: Sequence[np.ndarray],
             names: Optional[Sequence[str]] = None, decay_mask: Optional[Sequence[bool]] = None):
    """v <- momentum * v + g + wd * w;  w <- w - lr * v."""
    _check_finite(grads, names, "gradient")
    for i, (w, g, v) in enumerate(zip(params, grads, velocity)):
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        v *= momentum
        v += g
        if wd:
            v += wd * w
        w -= lr * v
    return params


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               names: Optional[Sequence[str]] = None, decay_mask: Optional[Sequence[bool]] = None):
    """Bias-corrected Adam moments with decoupled decay w <- w * (1 - lr * wd) applied first.

    ``state`` holds ``step`` (incremented here, so it is >= 1 during the
    update) and the moment lists ``m``/``v``, created on first use.
    """
    _check_finite(grads, names, "gradient")
    b1, b2 = betas
    if "m" not in state:
        state["m"] = [np.zeros_like(w) for w in params]
        state["v"] = [np.zeros_like(w) for w in params]
        state["step"] = 0
    _check_finite(state["m"] + state["v"], None, "optimizer state")
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (w, g) in enumerate(zip(params, grads)):
        m, v = state["m"][i], state["v"][i]
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if wd:
            w *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0, names=None, decay_mask=None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.names = names
        self.decay_mask = decay_mask
        self.velocity = [np.zeros_like(w) for w in self.params]

    def step(self, grads, lr):
        sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity,
                 self.names, self.decay_mask)


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, names=None,
                 decay_mask=None):
        self.params = list(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.names = names
        self.decay_mask = decay_mask
        self.state: dict = {}

    def step(self, grads, lr):
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay,
                   self.names, self.decay_mask)
