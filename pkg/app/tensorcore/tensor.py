"""
Dense tensor with reverse-mode automatic differentiation.

Every differentiable op appends one node to the active ``Graph``; backward
walks the nodes in strict reverse insertion order. A graph belongs to one
execution context (``contextvars``), so independent threads never share
nodes.
"""
import contextlib
import contextvars
import logging
import os
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import BackwardError, KPAlignError

logger = logging.getLogger(__name__)

DEBUG = os.getenv("KPALIGN_DEBUG", "false").lower() in ("1", "true", "yes")

_default_dtype = np.float64
_active_graph: contextvars.ContextVar = contextvars.ContextVar("active_graph", default=None)
_grad_enabled: contextvars.ContextVar = contextvars.ContextVar("grad_enabled", default=True)


class Tensor:
    """Row-major array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.sum())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # operator sugar; the kernels live in ops.py
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def __getitem__(self, index):
        from .ops import getitem
        return getitem(self, index)

    def reshape(self, *shape):
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        from .ops import transpose
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from .ops import sum as _sum
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from .ops import mean
        return mean(self, axis=axis, keepdims=keepdims)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape; insertion order is a topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph:
    graph = _active_graph.get()
    if graph is None:
        graph = Graph()
        _active_graph.set(graph)
    return graph


def grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def graph_scope(graph: Optional[Graph] = None):
    """Make ``graph`` (or a fresh one) the recording target inside the block."""
    graph = graph if graph is not None else Graph()
    token = _active_graph.set(graph)
    try:
        yield graph
    finally:
        _active_graph.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result and record it when any input needs gradients."""
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise KPAlignError(f"Op '{op}' produced non-finite values from finite inputs", "NON_FINITE_FORWARD")
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        current_graph().record(op, inputs, out, backward_fn)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf that requires gradients with d(loss)/d(leaf)."""
    if graph.consumed:
        raise BackwardError("backward already ran on this graph; call graph.reset() before reusing it")
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph.consumed = True
    if not loss.requires_grad:
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        out_grad = pending.pop(id(node.output), None)
        if out_grad is None:
            continue
        in_grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                _accumulate_leaf(tensor, grad)
            else:
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
