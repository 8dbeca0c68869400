"""Adam and the embedding-gradient row mask."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place to ``params`` named in ``grads``.

    Parameters not present in ``grads`` are left untouched.
    """
    if state.step < 0:
        raise ValueError(f"adam_step: negative step counter {state.step}")
    if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0:
        raise ValueError("adam_step: hyperparameters must be positive (betas in (0, 1))")
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise KeyError(f"adam_step: gradients for unknown parameters {unknown}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p.data = p.data - update
    return state


def mask_embedding_gradient(grad: np.ndarray, keep_row: int) -> np.ndarray:
    """Zero every row of an embedding-table gradient except ``keep_row``."""
    if grad.ndim != 2:
        raise ValueError(f"mask_embedding_gradient: expected [vocab, dim], got {grad.shape}")
    if not 0 <= keep_row < grad.shape[0]:
        raise IndexError(f"mask_embedding_gradient: row {keep_row} outside vocabulary of {grad.shape[0]}")
    out = np.zeros_like(grad)
    out[keep_row] = grad[keep_row]
    return out
