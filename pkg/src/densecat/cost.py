"""Static parameter, MAC and activation-memory accounting over a ModuleGraph.

MACs follow the usual "FLOPs" convention of this literature: one
multiply-accumulate per weight use in conv/linear layers, zero for norms,
activations and pooling.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .graph import INPUT, KINDS, ModuleGraph

BYTES_PER_VALUE = 4


@dataclass
class LayerCost:
    layer: str
    kind: str
    params: int
    macs: int
    out_shape: tuple


@dataclass
class CostReport:
    params: int
    macs: int
    peak_activation_bytes: int
    input_shape: tuple
    rows: list[LayerCost] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "macs", "out_shape"])
        for r in self.rows:
            w.writerow([r.layer, r.kind, r.params, r.macs, "x".join(map(str, r.out_shape))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"schema": "densecat.cost/1", "params": self.params, "macs": self.macs,
                "gmacs": self.macs / 1e9, "peak_activation_bytes": self.peak_activation_bytes,
                "input_shape": list(self.input_shape), "layers": len(self.rows)}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def _node_params(node) -> int:
    return sum(int(np.prod(s)) for s in KINDS[node.kind].params(node.attrs).values())


def count_params(graph: ModuleGraph) -> int:
    return sum(_node_params(n) for n in graph.nodes)


def count_macs(graph: ModuleGraph, input_shape) -> int:
    shapes = graph.infer_shapes(input_shape)
    return sum(KINDS[n.kind].macs([shapes[s] for s in n.inputs], shapes[n.name], n.attrs)
               for n in graph.nodes)


def estimate_peak_memory(graph: ModuleGraph, input_shape, batch: int = 1) -> int:
    """Largest total size of simultaneously live activations, in float32 bytes.

    A tensor is live from the step that produces it through the step of its
    last consumer; the graph output stays live to the end.
    """
    shape = (batch,) + tuple(input_shape[1:])
    shapes = graph.infer_shapes(shape)
    last_use = {INPUT: -1}
    for i, node in enumerate(graph.nodes):
        last_use.setdefault(node.name, len(graph.nodes))
        for s in node.inputs:
            last_use[s] = i
    last_use[graph.output] = len(graph.nodes)
    size = {k: int(np.prod(v)) * BYTES_PER_VALUE for k, v in shapes.items()}
    live = size[INPUT]
    peak = live
    for i, node in enumerate(graph.nodes):
        live += size[node.name]
        peak = max(peak, live)
        for s in set(node.inputs):
            if last_use[s] == i:
                live -= size[s]
    return peak


def cost_report(graph: ModuleGraph, input_shape) -> CostReport:
    input_shape = tuple(int(d) for d in input_shape)
    shapes = graph.infer_shapes(input_shape)
    rows = []
    for n in graph.nodes:
        macs = KINDS[n.kind].macs([shapes[s] for s in n.inputs], shapes[n.name], n.attrs)
        rows.append(LayerCost(n.name, n.kind, _node_params(n), int(macs), shapes[n.name]))
    return CostReport(
        params=sum(r.params for r in rows),
        macs=sum(r.macs for r in rows),
        peak_activation_bytes=estimate_peak_memory(graph, input_shape, input_shape[0]),
        input_shape=input_shape,
        rows=rows,
    )
