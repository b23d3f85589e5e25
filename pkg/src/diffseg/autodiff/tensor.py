"""Dense tensors and a dynamic tape for reverse-mode differentiation.

A :class:`Graph` is entered as a context manager; every primitive evaluated
while it is active and touching a tracked tensor appends a :class:`Node` to
``graph.nodes``. :func:`backward` replays that list in reverse.

Tensors are immutable values. Gradients never live on tensors; they are
returned by :func:`backward` keyed by parameter name.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """Immutable dense array of float32 or float64 scalars."""

    __slots__ = ("data", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # Operator sugar; implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


VJP = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "needs", "vjp", "out", "graph")

    def __init__(self, op: str, inputs: tuple, needs: tuple, vjp: VJP, out: Tensor, graph: "Graph"):
        self.op = op
        self.inputs = inputs
        self.needs = needs
        self.vjp = vjp
        self.out = out
        self.graph = graph

    def __repr__(self) -> str:
        return f"Node({self.op}, out={self.out.shape})"


class Graph:
    """Tape of primitive operations plus the named trainable leaves.

    Parameters
    ----------
    params : mapping of str to Tensor, optional
        Leaf tensors whose gradients :func:`backward` reports.
    """

    def __init__(self, params: Optional[Mapping[str, Tensor]] = None):
        self.params: dict[str, Tensor] = dict(params or {})
        self._param_ids = {id(t) for t in self.params.values()}
        self.nodes: list[Node] = []

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        self.params[name] = tensor
        self._param_ids.add(id(tensor))
        return tensor

    def tracks(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        if t.node is not None and t.node.graph is self:
            return True
        return id(t) in self._param_ids

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_graph() -> Optional[Graph]:
    s = _stack()
    return s[-1] if s else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; ops inside produce constant tensors."""
    s = _stack()
    s.append(None)
    try:
        yield
    finally:
        s.pop()


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def record(op: str, out_data: np.ndarray, inputs: tuple, vjp: VJP) -> Tensor:
    """Wrap ``out_data`` and append a node when any input is tracked."""
    check_finite(out_data, op)
    out = Tensor(out_data)
    g = current_graph()
    if g is not None:
        needs = tuple(g.tracks(x) for x in inputs)
        if any(needs):
            out.node = Node(op, inputs, needs, vjp, out, g)
            g.nodes.append(out.node)
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no history: gradients do not flow through the result."""
    return Tensor(x.data)


def backward(graph: Graph, loss: Tensor) -> dict[str, Tensor]:
    """Reverse sweep over ``graph``.

    Returns a gradient for every parameter registered with the graph;
    parameters that do not reach ``loss`` get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g, node.needs)
        for x, need, gx in zip(node.inputs, node.needs, in_grads):
            if not need or gx is None:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    return {
        name: Tensor(grads[id(p)] if id(p) in grads else np.zeros_like(p.data))
        for name, p in graph.params.items()
    }
