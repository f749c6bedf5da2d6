"""Tensor value type and the gradient tape that records differentiable ops.

Ops only record when a :class:`GradTape` is active on the current thread and
at least one input requires a gradient. Outside a tape every op is plain
inference: outputs never require gradients and nothing is retained.
"""
from __future__ import annotations

import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["GradTape"]:
    """Return the innermost recording tape on this thread, if any."""
    stack = _tape_stack()
    if stack and stack[-1] is not None:
        return stack[-1]
    return None


def is_recording() -> bool:
    return active_tape() is not None


class no_grad:
    """Context manager that suspends recording on the current thread."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is a numpy array; ``shape`` and the flat view follow from it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; implementations live in ops.py.
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Usage::

        with GradTape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._entered = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        self._entered = True
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate d(loss)/d(.) into ``grad`` of every tracked tensor.

        Gradients accumulate into existing ``grad`` arrays of leaves, matching
        the usual framework convention; intermediate grads are overwritten.
        """
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor recorded on this tape")
        for n in self.nodes:
            n.out.grad = None
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True).reshape(p.shape)
                else:
                    p.grad = p.grad + pg


def record_op(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape if needed."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out
