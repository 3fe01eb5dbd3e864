"""Tensor value type and the reverse-mode tape.

A :class:`Tensor` wraps a float64 numpy array.  Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor with ``requires_grad`` are appended to the tape together with a
closure mapping the output gradient to input gradients.  ``tape.backward``
walks the records in strict reverse order and accumulates gradients
additively into ``Tensor.grad``.

Tapes are thread-local: each worker thread records on its own tape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ``ops`` to keep this file small.
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

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Backward
    op: str


@dataclass
class Tape:
    """Ordered record of executed differentiable operations."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Backward, op: str) -> None:
        self.records.append(Record(out, parents, backward, op))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked tensor."""
        if grad is None:
            if loss.size != 1:
                raise ValueError(f"backward needs an explicit seed gradient for shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for parent, gp in zip(rec.parents, grads):
                if gp is None or not parent.requires_grad:
                    continue
                if gp.shape != parent.shape:
                    raise RuntimeError(
                        f"{rec.op}: gradient shape {gp.shape} does not match input {parent.shape}"
                    )
                parent.grad = gp if parent.grad is None else parent.grad + gp

    def clear(self) -> None:
        self.records.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence, backward: Backward, op: str) -> Tensor:
    """Create an op output and record it when any parent is tracked."""
    parents = tuple(p for p in parents)
    needs = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, tuple(as_tensor(p) for p in parents), backward, op)
        else:
            out.requires_grad = False
    return out
