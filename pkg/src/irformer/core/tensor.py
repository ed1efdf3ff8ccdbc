"""
Dense float64 tensor with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` whose ``_parents``
and ``_backward`` fields record how to push an upstream gradient back to its
inputs.  :meth:`Tensor.backward` replays that record in reverse topological
order and accumulates gradients into leaf tensors that require them.  The
recorded graph is released once backward finishes.

Buffers are always C-contiguous ``numpy.float64`` arrays.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from irformer.errors import ContractError, NumericalError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    return arr if arr.flags.c_contiguous else arr.copy()


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    N-D array of 64-bit floats with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float64 buffer.
    requires_grad : bool
        Whether backward should populate ``grad`` for this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = _contiguous(np.array(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor created with non-finite values")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: BackwardFn, op: str) -> "Tensor":
        """Wrap an op output, recording the graph edge when needed."""
        out = cls.__new__(cls)
        out.data = _contiguous(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(out.data)):
            raise NumericalError(f"{op} produced non-finite values")
        out.grad = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (implementations live in ops) ---------------------

    def __add__(self, other):
        from irformer.core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from irformer.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from irformer.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from irformer.core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from irformer.core import ops
        return ops.div(self, other)

    def __neg__(self):
        from irformer.core import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from irformer.core import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from irformer.core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from irformer.core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from irformer.core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from irformer.core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    # -- reverse mode -----------------------------------------------------

    def backward(self) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must hold exactly one element.  Gradients add onto whatever
        is already stored, so calling twice without zeroing doubles them.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ContractError(
                        f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name (e.g. ``encoder.3.msa.wq``)."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
