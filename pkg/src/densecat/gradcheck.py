"""Central finite-difference checks of every op's backward pass, in double precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .blocks import MixerConfig, add_feature_mixer
from .graph import INPUT, GraphBuilder
from .tensor import Tape, Tensor

DEFAULT_TOL = 1e-4
ABS_FALLBACK = 1e-6
MAX_RESAMPLES = 20


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    coordinates: int
    resamples: int
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel error {self.max_rel_error:.3e} "
                f"over {self.coordinates} coordinates (tol {self.tol:g})")


def _scalar(fn, tensors, proj):
    out = fn(*tensors)
    return float(np.sum(out.data * proj)) if proj is not None else float(out.data)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
               h: float = 1e-5) -> tuple[float, int]:
    """Worst relative error between the tape gradient and central differences.

    Non-scalar outputs are reduced with a fixed random projection.  Where the
    analytic gradient magnitude is below 1e-6 the absolute error is used.
    Returns ``(max_error, coordinates_checked)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        if out.data.ndim == 0:
            proj = None
            loss = out
        else:
            proj = np.random.default_rng(seed).standard_normal(out.shape)
            loss = ops.sum_all(ops.mul(out, Tensor(proj)))
    analytic = tape.backward(loss, tensors)
    worst, count = 0.0, 0
    for a, g in zip(arrays, analytic):
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(fn, [Tensor(x) for x in arrays], proj)
            flat[i] = orig - h
            down = _scalar(fn, [Tensor(x) for x in arrays], proj)
            flat[i] = orig
            num = (up - down) / (2 * h)
            an = float(gflat[i])
            err = abs(an - num)
            if abs(an) >= ABS_FALLBACK:
                err /= max(abs(an), abs(num))
            worst = max(worst, err)
            count += 1
    return worst, count


# -- the op registry -----------------------------------------------------------------
# Each entry maps an rng to (fn, inputs, kink) where ``kink(inputs)`` is True when
# the sample sits too close to a non-differentiable point and must be redrawn.


def _near(values, points, margin=1e-3):
    v = np.asarray(values)
    return any(np.any(np.abs(v - p) < margin) for p in points)


def _conv(groups, k, stride, pad, cin=4, cout=4, bias=True):
    def make(rng):
        x = rng.standard_normal((2, cin, 5, 5))
        w = rng.standard_normal((cout, cin // groups, k, k)) * 0.5
        ins = [x, w] + ([rng.standard_normal(cout)] if bias else [])

        def fn(x, w, b=None):
            return ops.conv2d(x, w, b, stride=stride, pad=pad, groups=groups)
        return fn, ins, None
    return make


def _unary(op):
    def make(rng):
        return op, [rng.standard_normal((2, 3, 3, 3))], None
    return make


def _relu(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    return (lambda t: ops.activation(t, "relu")), [x], lambda ins: _near(ins[0], [0.0], 1e-3)


def _maxpool(rng):
    x = rng.standard_normal((2, 2, 4, 4))

    def kink(ins):
        # ties within a window make max non-differentiable
        v = np.sort(ins[0].reshape(-1))
        return bool(np.any(np.diff(v) < 1e-3))
    return (lambda t: ops.pool(t, "max", 3, 1, 1)), [x], kink


def _layer_norm(rng):
    shapes = [(2, 5, 3, 3), (5,), (5,)]
    x, g, b = (rng.standard_normal(s) for s in shapes)
    return (lambda x, g, b: ops.layer_norm(x, g, b)), [x, g, b], None


def _batch_norm(rng):
    # small input scale: normalization is scale-invariant, and 1/std-sized gradients
    # stay well above the finite-difference round-off floor
    x = 0.1 * rng.standard_normal((3, 4, 2, 2))
    g, b = rng.standard_normal(4), rng.standard_normal(4)

    def fn(x, g, b):
        return ops.batch_norm(x, g, b, np.zeros(4), np.ones(4), mode="train")
    return fn, [x, g, b], None


def _linear(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    return ops.linear, [x, w, b], None


def _rescale(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    return ops.channel_rescale, [x, rng.standard_normal(4), rng.standard_normal((4, 4)),
                                 rng.standard_normal(4)], None


def _concat(rng):
    a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    return (lambda a, b: ops.concat_channels([a, b])), [a, b], None


def _drop_path(rng):
    x = rng.standard_normal((4, 2, 2, 2))
    seed = int(rng.integers(1 << 30))

    def fn(t):
        return ops.stochastic_depth(t, 0.3, "train", np.random.default_rng(seed))
    return fn, [x], None


def _cross_entropy(rng):
    logits = rng.standard_normal((4, 5))
    targets = rng.dirichlet(np.ones(5), 4)
    return (lambda z: ops.softmax_cross_entropy(z, targets, 0.1)), [logits], None


def micro_model_graph(channels: int = 4, growth_rate: int = 2, classes: int = 3):
    """Two feature mixers (the second with channel re-scaling) and a pooled linear head."""
    b = GraphBuilder(channels)
    x = add_feature_mixer(b, INPUT, MixerConfig(channels, growth_rate, 2.0, 3), "m0")
    x = add_feature_mixer(b, x, MixerConfig(channels + growth_rate, growth_rate, 2.0, 3,
                                            rescale=True), "m1")
    x = b.add("head.pool", "global_pool", x)
    x = b.norm("head.norm", x, "layer")
    x = b.add("head.flatten", "flatten", x)
    b.add("head.fc", "linear", x, din=b.ch[x], dout=classes)
    return b.build({"kind": "micro_model"})


def _micro_model(rng):
    graph = micro_model_graph().initialize(int(rng.integers(1 << 30)), precision="double")
    names = list(graph.params)
    # perturb away from the identity-like init so every path carries signal
    values = [graph.params[n].data + 0.3 * rng.standard_normal(graph.params[n].shape) for n in names]
    x = rng.standard_normal((2, 4, 5, 5))

    def fn(x, *params):
        for n, p in zip(names, params):
            graph.params[n] = p
        return graph.forward(x, training=False)
    return fn, [x] + values, None


OPS: dict[str, Callable] = {
    "conv2d": _conv(1, 3, 2, 1),
    "conv2d_grouped": _conv(2, 3, 1, 1),
    "conv2d_depthwise": _conv(4, 7, 1, 3),
    "conv2d_pointwise": _conv(1, 1, 1, 0, bias=False),
    "concat": _concat,
    "slice_channels": lambda rng: ((lambda t: ops.slice_channels(t, 1, 3)),
                                   [rng.standard_normal((2, 4, 2, 2))], None),
    "add": lambda rng: (ops.add, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))], None),
    "mul": lambda rng: (ops.mul, [rng.standard_normal((2, 3, 2, 2)),
                                  rng.standard_normal((1, 3, 1, 1))], None),
    "layer_norm": _layer_norm,
    "batch_norm": _batch_norm,
    "relu": _relu,
    "gelu": _unary(lambda t: ops.activation(t, "gelu")),
    "silu": _unary(lambda t: ops.activation(t, "silu")),
    "sigmoid": _unary(ops.sigmoid),
    "avg_pool": _unary(lambda t: ops.pool(t, "avg", 2, 1, 1)),
    "max_pool": _maxpool,
    "global_pool": _unary(lambda t: ops.pool(t, "global_avg")),
    "flatten": _unary(ops.flatten),
    "linear": _linear,
    "channel_rescale": _rescale,
    "stochastic_depth": _drop_path,
    "softmax_cross_entropy": _cross_entropy,
    "micro_model": _micro_model,
}


def check_op(name: str, seed: int = 0, h: float = 1e-5, tol: float = DEFAULT_TOL,
             registry: Optional[dict] = None) -> GradCheckResult:
    registry = OPS if registry is None else registry
    if name not in registry:
        raise KeyError(f"unknown op {name!r}; available: {sorted(registry)}")
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_RESAMPLES):
        fn, inputs, kink = registry[name](rng)
        if kink is None or not kink(inputs):
            break
    else:
        raise RuntimeError(f"{name}: could not sample a differentiable point in {MAX_RESAMPLES} tries")
    err, count = grad_check(fn, inputs, seed, h)
    return GradCheckResult(name, err, count, attempt, tol)


def check_all(names: Optional[Sequence[str]] = None, seed: int = 0,
              registry: Optional[dict] = None) -> list[GradCheckResult]:
    registry = OPS if registry is None else registry
    return [check_op(n, seed, registry=registry) for n in (names or sorted(registry))]
