"""Central finite-difference checks for the autodiff engine (run in float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numeric_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3) -> list[np.ndarray]:
    """d f(*arrays) / d arrays[i] by fourth-order central differences.

    The five-point stencil has O(eps^4) truncation error, which allows a step
    large enough that float64 rounding stays negligible even for tiny
    gradient entries. `f` must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        def at(j, x):
            flat[j] = x
            return float(f(*[Tensor(b) for b in arrays]).data)

        for j in range(flat.size):
            keep = flat[j]
            f2, f1 = at(j, keep + 2 * eps), at(j, keep + eps)
            b1, b2 = at(j, keep - eps), at(j, keep - 2 * eps)
            flat[j] = keep
            gf[j] = (8 * (f1 - b1) - (f2 - b2)) / (12 * eps)
        out.append(g)
    return out


def analytic_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(f(*leaves))
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def check(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3) -> float:
    """Largest relative error between backprop and central differences over all inputs."""
    ana = analytic_grads(f, arrays)
    num = numeric_grads(f, arrays, eps)
    return max(max_relative_error(a, n) for a, n in zip(ana, num))
