"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward


def numerical_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(op: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0, eps: float = 1e-6) -> float:
    """Worst relative error between backward and central differences.

    The scalar probed is ``sum(op(*inputs) * R)`` for a fixed random ``R`` so
    every output element contributes a distinct weight.
    """
    out = op(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar() -> float:
        return float((op(*inputs).data * weights).sum())

    loss = (out * Tensor(weights, dtype=out.dtype)).sum()
    analytic = backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        numeric = numerical_gradient(scalar, t.data, eps)
        worst = max(worst, relative_error(analytic.get(t.name, np.zeros_like(t.data)), numeric))
    return worst
