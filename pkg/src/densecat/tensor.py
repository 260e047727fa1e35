"""Dense tensors and a reverse-mode tape.

Ops in :mod:`densecat.ops` produce new :class:`Tensor` objects and, while a
:class:`Tape` is active, append a :class:`TapeNode` holding a closure that maps
the upstream gradient to input gradients.  ``Tape.backward`` walks those nodes
once, in reverse recording order.
"""

from __future__ import annotations

import contextvars
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Optional, Sequence

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "densecat_active_tape", default=None
)


class Tensor:
    """An N-dimensional real array with an optional gradient buffer.

    Activations use the N, C, H, W layout.  Tensors produced by ops are treated
    as immutable; only optimizers write into parameter leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None,
                 name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is not None:
            dtype = PRECISIONS[precision]
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data.astype(PRECISIONS[precision]), self.requires_grad,
                      name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{flag})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Records differentiable ops executed inside ``with tape:``."""

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise RuntimeError("cannot record onto a tape that was already differentiated")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

        Leaves in ``params`` that the loss does not depend on get zero gradients.
        Returns the gradients of ``params`` in order.
        """
        if self.consumed:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        params = list(params)
        produced = {id(n.output) for n in self.nodes}
        if loss.requires_grad and id(loss) not in produced:
            raise ValueError("loss is not reachable from this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if id(t) not in produced:
                    leaves[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            t.grad = grads[key].astype(t.data.dtype, copy=False).reshape(t.shape)
        out = []
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        self.consumed = True
        return out


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    return tape.backward(loss, params)


def result(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    """Wrap an op output and record it on the active tape when needed."""
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(TapeNode(op, tuple(parents), out, grad_fn))
    return out


# -- binary tensor format -------------------------------------------------------

MAGIC = b"DCT1"


def write_tensor(t: Tensor | np.ndarray, fh: BinaryIO) -> int:
    """Write one tensor; returns the number of bytes written."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    fh.write(header)
    fh.write(body)
    return len(header) + len(body)


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"truncated tensor body: expected {4 * count} bytes, got {len(raw)}")
    return Tensor(np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32))
