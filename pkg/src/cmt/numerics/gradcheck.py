"""Central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import GradTape, Tensor, no_grad


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
                 coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for the given flat coords."""
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    with no_grad():
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            up = f(Tensor(base)).item()
            flat[i] = keep - eps
            down = f(Tensor(base)).item()
            flat[i] = keep
            out[i] = (up - down) / (2 * eps)
    return out.reshape(base.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with GradTape() as tape:
        y = f(t)
    tape.backward(y)
    return np.zeros_like(t.data) if t.grad is None else t.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               coords: Optional[Sequence[int]] = None) -> float:
    """Max relative error between tape gradients and central differences.

    The error at each coordinate is ``|a - n| / max(1e-8, |n|)``. ``coords``
    restricts the check to a subset of flat indices for large tensors.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    a = analytic_grad(f, x).reshape(-1)
    n = numeric_grad(f, x, eps, coords).reshape(-1)
    idx = np.arange(a.size) if coords is None else np.asarray(coords, dtype=np.int64)
    if idx.size == 0:
        return 0.0
    err = np.abs(a[idx] - n[idx]) / np.maximum(1e-8, np.abs(n[idx]))
    return float(err.max())
