"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`spotpatch.ops`
record a node on the output tensor holding references to the inputs and a
backward rule; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order. A graph can be differentiated once: the backward rules
are released after use and a second call raises :class:`GraphError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import GraphError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One executed op: its inputs and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("parents", "backward_fn", "name", "consumed")

    def __init__(self, parents: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self.consumed = False


class Tensor:
    """A dense array plus (optionally) its gradient.

    Floating inputs keep their dtype; anything else is stored as
    ``DEFAULT_DTYPE`` (single precision).
    """

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward_fn, name: str) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.node = Node(parents, backward_fn, name)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the op implementations live in spotpatch.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.reduce_sum(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient."""
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if self.node is not None and self.node.consumed:
            raise GraphError("graph already differentiated; run a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order = topological_order(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if t.node is None:
                if g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if t.node.consumed:
                raise GraphError(f"graph node {t.node.name!r} already differentiated")
            if g is not None:
                parent_grads = t.node.backward_fn(g)
                for p, pg in zip(t.node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
            t.node.consumed = True
            t.node.backward_fn = None


def topological_order(root: Tensor) -> list:
    """Tensors reachable from ``root`` (inputs first, ``root`` last)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
