"""A flat, serializable DAG of typed layer nodes.

Nodes are kept in a valid execution order.  Each node names its inputs
(``"input"`` is the image tensor), carries plain-JSON attributes, and declares
its learnable parameters by shape.  Parameter values live on the graph and are
materialized lazily by :meth:`ModuleGraph.initialize`, so large presets can be
costed without allocating weights.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import PRECISIONS, Tensor

SCHEMA = "densecat.arch/1"
INPUT = "input"


class GraphError(ValueError):
    pass


@dataclass
class Node:
    name: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "attrs": dict(self.attrs)}


@dataclass(frozen=True)
class NodeKind:
    """Static behaviour of one node kind.

    ``channels`` maps input channel counts to the output channel count,
    ``shape`` maps full input shapes to the output shape, ``macs`` counts
    multiply-accumulates, ``params`` declares parameter shapes.
    """

    channels: Callable[[list[int], dict], int]
    shape: Callable[[list[tuple], dict], tuple]
    forward: Callable
    params: Callable[[dict], dict] = lambda a: {}
    macs: Callable[[list[tuple], tuple, dict], int] = lambda i, o, a: 0


def _conv_out(size: int, a: dict) -> int:
    return (size + 2 * a.get("pad", 0) - a["k"]) // a.get("stride", 1) + 1


def _conv_shape(ins, a):
    n, c, h, w = ins[0]
    if c != a["cin"]:
        raise GraphError(f"conv expects {a['cin']} input channels, got {c}")
    if a.get("exact") and (h % a["stride"] or w % a["stride"]):
        raise GraphError(f"input {h}x{w} not divisible by stride {a['stride']}")
    if h + 2 * a.get("pad", 0) < a["k"] or w + 2 * a.get("pad", 0) < a["k"]:
        raise GraphError(f"kernel {a['k']} larger than padded input {h}x{w}")
    return (n, a["cout"], _conv_out(h, a), _conv_out(w, a))


def _conv_params(a):
    p = {"weight": (a["cout"], a["cin"] // a.get("groups", 1), a["k"], a["k"])}
    if a.get("bias", True):
        p["bias"] = (a["cout"],)
    return p


def _conv_macs(ins, out, a):
    n, cout, ho, wo = out
    return n * cout * ho * wo * (a["cin"] // a.get("groups", 1)) * a["k"] * a["k"]


def _conv_fwd(xs, p, a, ctx):
    return ops.conv2d(xs[0], p["weight"], p.get("bias"), a.get("stride", 1), a.get("pad", 0),
                      a.get("groups", 1))


def _same(ins, a):
    return ins[0]


def _norm_params(a):
    return {"gamma": (a["c"],), "beta": (a["c"],)}


def _bn_fwd(xs, p, a, ctx):
    return ops.batch_norm(xs[0], p["gamma"], p["beta"], ctx.buffers[f"{ctx.node}.running_mean"],
                          ctx.buffers[f"{ctx.node}.running_var"], a.get("momentum", 0.1),
                          a.get("eps", 1e-5), "train" if ctx.training else "eval")


def _pool_shape(ins, a):
    n, c, h, w = ins[0]
    k, s, pad = a["k"], a["stride"], a.get("pad", 0)
    if k > h + 2 * pad or k > w + 2 * pad:
        raise GraphError(f"pool kernel {k} larger than padded input {h}x{w}")
    return (n, c, (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1)


def _concat_shape(ins, a):
    first = ins[0]
    for s in ins[1:]:
        if s[0] != first[0] or s[2:] != first[2:]:
            raise GraphError(f"concat spatial mismatch {s} vs {first}")
    return (first[0], sum(s[1] for s in ins)) + tuple(first[2:])


def _add_shape(ins, a):
    if any(s != ins[0] for s in ins):
        raise GraphError(f"add shape mismatch {ins}")
    return ins[0]


def _linear_shape(ins, a):
    if ins[0][1] != a["din"]:
        raise GraphError(f"linear expects {a['din']} features, got {ins[0][1]}")
    return (ins[0][0], a["dout"])


def _drop_fwd(xs, p, a, ctx):
    rate = ctx.drop_rates.get(ctx.node, a["rate"])
    return ops.stochastic_depth(xs[0], rate, "train" if ctx.training else "eval", ctx.rng)


KINDS: dict[str, NodeKind] = {
    "conv": NodeKind(
        channels=lambda c, a: a["cout"], shape=_conv_shape, forward=_conv_fwd,
        params=_conv_params, macs=_conv_macs),
    "layer_norm": NodeKind(
        channels=lambda c, a: c[0], shape=_same, params=_norm_params,
        forward=lambda xs, p, a, ctx: ops.layer_norm(xs[0], p["gamma"], p["beta"], a.get("eps", 1e-6))),
    "batch_norm": NodeKind(
        channels=lambda c, a: c[0], shape=_same, params=_norm_params, forward=_bn_fwd),
    "act": NodeKind(
        channels=lambda c, a: c[0], shape=_same,
        forward=lambda xs, p, a, ctx: ops.activation(xs[0], a["fn"])),
    "pool": NodeKind(
        channels=lambda c, a: c[0], shape=_pool_shape,
        forward=lambda xs, p, a, ctx: ops.pool(xs[0], a["mode"], a["k"], a["stride"], a.get("pad", 0))),
    "global_pool": NodeKind(
        channels=lambda c, a: c[0], shape=lambda ins, a: ins[0][:2] + (1, 1),
        forward=lambda xs, p, a, ctx: ops.pool(xs[0], "global_avg")),
    "flatten": NodeKind(
        channels=lambda c, a: c[0], shape=lambda ins, a: (ins[0][0], int(np.prod(ins[0][1:]))),
        forward=lambda xs, p, a, ctx: ops.flatten(xs[0])),
    "linear": NodeKind(
        channels=lambda c, a: a["dout"], shape=_linear_shape,
        params=lambda a: {"weight": (a["din"], a["dout"]), **({"bias": (a["dout"],)} if a.get("bias", True) else {})},
        macs=lambda ins, out, a: out[0] * a["din"] * a["dout"],
        forward=lambda xs, p, a, ctx: ops.linear(xs[0], p["weight"], p.get("bias"))),
    "concat": NodeKind(
        channels=lambda c, a: sum(c), shape=_concat_shape,
        forward=lambda xs, p, a, ctx: ops.concat_channels(xs)),
    "add": NodeKind(
        channels=lambda c, a: c[0], shape=_add_shape,
        forward=lambda xs, p, a, ctx: ops.add(xs[0], xs[1])),
    "rescale": NodeKind(
        channels=lambda c, a: c[0], shape=_same,
        params=lambda a: {"gamma": (a["c"],), "se_weight": (a["c"], a["c"]), "se_bias": (a["c"],)},
        macs=lambda ins, out, a: ins[0][0] * a["c"] * a["c"],
        forward=lambda xs, p, a, ctx: ops.channel_rescale(xs[0], p["gamma"], p["se_weight"], p["se_bias"])),
    "drop_path": NodeKind(channels=lambda c, a: c[0], shape=_same, forward=_drop_fwd),
}


def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range values."""
    z = rng.standard_normal(shape, dtype=np.float32)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()), dtype=np.float32)
        bad = np.abs(z) > 2.0
    return (z * np.float32(std)).astype(dtype)


def _init_param(kind: str, pname: str, shape, rng, dtype, attrs=None) -> np.ndarray:
    if pname == "weight" and (attrs or {}).get("init") == "fan_in":
        # He init: std sqrt(2 / fan_in), for ReLU-family nets trained from scratch
        fan_in = int(np.prod(shape[1:]))
        return trunc_normal(rng, shape, float(np.sqrt(2.0 / fan_in)), dtype)
    if pname in ("weight", "se_weight"):
        return trunc_normal(rng, shape, 0.02, dtype)
    if pname == "gamma":
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


@dataclass
class _Ctx:
    training: bool
    rng: Optional[np.random.Generator]
    buffers: dict
    drop_rates: dict
    node: str = ""


class ModuleGraph:
    """Architecture description plus (optionally materialized) parameters."""

    def __init__(self, nodes: Sequence[Node], in_channels: int = 3, meta: Optional[dict] = None):
        self.nodes = list(nodes)
        self.in_channels = in_channels
        self.meta = dict(meta or {})
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._index = {n.name: n for n in self.nodes}
        self._validate()

    # -- structure ----------------------------------------------------------------

    def _validate(self) -> None:
        seen = {INPUT}
        for i, node in enumerate(self.nodes):
            path = f"nodes[{i}] ({node.name})"
            if node.kind not in KINDS:
                raise GraphError(f"{path}: unknown node kind {node.kind!r}")
            if node.name in seen:
                raise GraphError(f"{path}: duplicate node name")
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"{path}: input {src!r} is not defined earlier")
            seen.add(node.name)
        if not self.nodes:
            raise GraphError("graph has no nodes")

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> Node:
        return self._index[name]

    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for node in self.nodes:
            for pname, shape in KINDS[node.kind].params(node.attrs).items():
                shapes[f"{node.name}.{pname}"] = tuple(shape)
        return shapes

    def channels(self) -> dict[str, int]:
        ch = {INPUT: self.in_channels}
        for node in self.nodes:
            ch[node.name] = KINDS[node.kind].channels([ch[s] for s in node.inputs], node.attrs)
        return ch

    def infer_shapes(self, input_shape: Sequence[int]) -> dict[str, tuple]:
        if any(d is None or int(d) <= 0 for d in input_shape):
            raise GraphError(f"static input shape required, got {tuple(input_shape)}")
        shapes = {INPUT: tuple(int(d) for d in input_shape)}
        for node in self.nodes:
            try:
                shapes[node.name] = tuple(
                    int(d) for d in KINDS[node.kind].shape([shapes[s] for s in node.inputs], node.attrs))
            except GraphError as exc:
                raise GraphError(f"{node.name}: {exc}") from None
        return shapes

    def consumers(self) -> dict[str, list[int]]:
        users: dict[str, list[int]] = {INPUT: []}
        for i, node in enumerate(self.nodes):
            users.setdefault(node.name, [])
            for s in node.inputs:
                users[s].append(i)
        return users

    # -- parameters -----------------------------------------------------------------

    @property
    def initialized(self) -> bool:
        return bool(self.params) or not self.param_shapes()

    def initialize(self, seed: int = 0, precision: str = "single") -> "ModuleGraph":
        rng = np.random.default_rng(seed)
        dtype = PRECISIONS[precision]
        self.params = {}
        self.buffers = {}
        for node in self.nodes:
            for pname, shape in KINDS[node.kind].params(node.attrs).items():
                data = _init_param(node.kind, pname, shape, rng, dtype, node.attrs)
                self.params[f"{node.name}.{pname}"] = Tensor(data, requires_grad=True,
                                                             name=f"{node.name}.{pname}")
            if node.kind == "batch_norm":
                self.buffers[f"{node.name}.running_mean"] = np.zeros(node.attrs["c"], dtype)
                self.buffers[f"{node.name}.running_var"] = np.ones(node.attrs["c"], dtype)
        return self

    def to_precision(self, precision: str) -> "ModuleGraph":
        dtype = PRECISIONS[precision]
        for name, t in self.params.items():
            self.params[name] = Tensor(t.data.astype(dtype), requires_grad=True, name=name)
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    def parameters(self) -> list[Tensor]:
        if not self.initialized:
            self.initialize()
        return list(self.params.values())

    def drop_path_nodes(self) -> list[str]:
        return [n.name for n in self.nodes if n.kind == "drop_path"]

    # -- execution ----------------------------------------------------------------

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                capture: Iterable[str] = (), drop_rates: Optional[dict] = None):
        """Run the graph.  Returns the output tensor, or ``(output, captured)``
        when ``capture`` names nodes whose activations should be kept."""
        if not self.initialized:
            self.initialize()
        capture = list(capture)
        missing = [c for c in capture if c not in self._index and c != INPUT]
        if missing:
            raise GraphError(f"unknown layer(s) {missing}; available: {self.names()}")
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise GraphError(f"expected input (N, {self.in_channels}, H, W), got {x.shape}")
        ctx = _Ctx(training, rng, self.buffers, drop_rates or {})
        users = self.consumers()
        remaining = {k: len(v) for k, v in users.items()}
        keep = set(capture) | {self.output}
        values = {INPUT: x}
        captured = {INPUT: x} if INPUT in capture else {}
        for node in self.nodes:
            spec = KINDS[node.kind]
            params = {p: self.params[f"{node.name}.{p}"] for p in spec.params(node.attrs)}
            ctx.node = node.name
            values[node.name] = spec.forward([values[s] for s in node.inputs], params, node.attrs, ctx)
            if node.name in capture:
                captured[node.name] = values[node.name]
            for s in node.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s not in keep:
                    values.pop(s, None)
        out = values[self.output]
        return (out, captured) if capture else out

    # -- serialization --------------------------------------------------------------

    def to_json(self) -> dict:
        doc = {"schema": SCHEMA}
        doc.update(self.meta)
        doc["in_channels"] = self.in_channels
        doc["nodes"] = [n.to_json() for n in self.nodes]
        return doc


def serialize_architecture(graph: ModuleGraph) -> str:
    return json.dumps(graph.to_json(), sort_keys=True, indent=1)


def deserialize_architecture(text: str | dict) -> ModuleGraph:
    doc = json.loads(text) if isinstance(text, str) else dict(text)
    if doc.get("schema") != SCHEMA:
        raise GraphError(f"unsupported architecture schema {doc.get('schema')!r}")
    nodes = []
    for i, raw in enumerate(doc.get("nodes", [])):
        if raw.get("kind") not in KINDS:
            raise GraphError(f"nodes[{i}] ({raw.get('name')}): unknown node kind {raw.get('kind')!r}")
        nodes.append(Node(raw["name"], raw["kind"], list(raw["inputs"]), dict(raw.get("attrs", {}))))
    meta = {k: v for k, v in doc.items() if k not in ("schema", "nodes", "in_channels")}
    return ModuleGraph(nodes, doc.get("in_channels", 3), meta)


def config_hash(graph: ModuleGraph) -> str:
    return hashlib.sha256(serialize_architecture(graph).encode()).hexdigest()[:16]


class GraphBuilder:
    """Appends nodes while tracking channel counts, for composing fragments."""

    def __init__(self, in_channels: int = 3):
        self.in_channels = in_channels
        self.nodes: list[Node] = []
        self.ch: dict[str, int] = {INPUT: in_channels}

    def add(self, name: str, kind: str, inputs: Sequence[str] | str, **attrs) -> str:
        if isinstance(inputs, str):
            inputs = [inputs]
        if name in self.ch:
            raise GraphError(f"duplicate node name {name!r}")
        for s in inputs:
            if s not in self.ch:
                raise GraphError(f"{name}: unknown input {s!r}")
        node = Node(name, kind, list(inputs), attrs)
        self.ch[name] = KINDS[kind].channels([self.ch[s] for s in inputs], attrs)
        self.nodes.append(node)
        return name

    def conv(self, name, x, cout, k, stride=1, pad=None, groups=1, bias=True, **extra) -> str:
        pad = k // 2 if pad is None else pad
        return self.add(name, "conv", x, cin=self.ch[x], cout=int(cout), k=int(k), stride=int(stride),
                        pad=int(pad), groups=int(groups), bias=bool(bias), **extra)

    def norm(self, name, x, kind="layer") -> str:
        if kind == "layer":
            return self.add(name, "layer_norm", x, c=self.ch[x], eps=1e-6)
        if kind == "batch":
            return self.add(name, "batch_norm", x, c=self.ch[x], eps=1e-5, momentum=0.1)
        raise GraphError(f"unknown norm kind {kind!r}")

    def act(self, name, x, fn) -> str:
        if fn not in ops.ACTIVATIONS:
            raise GraphError(f"unknown activation {fn!r}")
        return self.add(name, "act", x, fn=fn)

    def build(self, meta: Optional[dict] = None) -> ModuleGraph:
        return ModuleGraph(self.nodes, self.in_channels, meta)


def round_up(value: float, multiple: int) -> int:
    return int(math.ceil(value / multiple - 1e-9)) * multiple
