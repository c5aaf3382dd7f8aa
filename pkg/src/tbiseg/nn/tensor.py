"""Tape-based reverse-mode autodiff on numpy arrays.

Every op returns a new :class:`Tensor` holding a closure that maps the
output gradient to gradients of its inputs. :func:`backward` walks the
graph in reverse topological order and accumulates gradients into leaf
tensors that have ``requires_grad`` set.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = ["Tensor", "Node", "UsageError", "backward", "tracing", "as_tensor", "no_grad"]


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Node:
    """One primitive in a traced computation."""

    index: int
    op: str
    inputs: Tuple[int, ...]
    shape: Tuple[int, ...]
    param: Optional[str] = None


class _Tape:
    def __init__(self):
        self.nodes: List[Node] = []
        self._ids = {}

    def node_id(self, t: "Tensor") -> int:
        key = id(t)
        if key not in self._ids:
            # first sighting of a tensor not produced by a traced op
            op = "param" if t.name is not None else "input"
            self._add(t, op, ())
        return self._ids[key]

    def _add(self, t: "Tensor", op: str, inputs) -> None:
        idx = len(self.nodes)
        self.nodes.append(Node(idx, op, tuple(inputs), tuple(t.data.shape), t.name if op == "param" else None))
        self._ids[id(t)] = idx

    def record(self, out: "Tensor", op: str, parents) -> None:
        ins = [self.node_id(p) for p in parents]
        self._add(out, op, ins)


_TAPE: Optional[_Tape] = None
_GRAD_ENABLED = True


@contextlib.contextmanager
def tracing():
    """Record every primitive executed in the block; yields the node list."""
    global _TAPE
    prev, _TAPE = _TAPE, _Tape()
    try:
        yield _TAPE.nodes
    finally:
        _TAPE = prev


@contextlib.contextmanager
def no_grad():
    """Skip building backward closures (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _float_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        return backward(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; ``grad_fn(g)`` returns one gradient per parent."""
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    if _TAPE is not None:
        _TAPE.record(out, op, parents)
    return out


def backward(loss: Tensor):
    """Reverse-mode accumulation from a scalar ``loss`` into leaf ``.grad``.

    Returns a dict mapping named leaves (parameters) to their gradients.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    named = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
                if t.name is not None:
                    named[t.name] = t.grad
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return named


# elementwise / reductions ---------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a, b = as_tensor(a), float(b)  # python float keeps the array dtype
        return make(a.data + b, (a,), lambda g: (g,), "add")
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a, b = as_tensor(a), float(b)
        return make(a.data * b, (a,), lambda g: (g * b,), "mul")
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with inputs floored at ``floor`` (zero gradient below it)."""
    x = a.data
    safe = np.maximum(x, floor)
    return make(np.log(safe), (a,), lambda g: (np.where(x > floor, g / safe, 0.0).astype(x.dtype),), "log")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return make(np.asarray(out), (a,), grad, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")
