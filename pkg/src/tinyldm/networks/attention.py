"""Multi-head attention and the cross-attention sites adapters hook into."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..tensor import ShapeError, Tensor, softmax
from ..tensor.rng import RngStream
from .layers import Module, he_normal, param

PROJECTIONS = ("q", "k", "v", "o")

KvTransform = Callable[[Tensor, Tensor], tuple[Tensor, Tensor]]


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V over [B, N, d] queries and [B, L, d] keys/values."""
    dh = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return merge_heads(softmax(scores, mask) @ vh)


@dataclass
class AdapterSet:
    """Runtime adapter contributions, keyed by site id.

    ``lora[site]`` lists ``({proj: (A, B)}, scale)`` terms whose products are
    added to the frozen projections; ``kv[site]`` lists transforms applied in
    order to the text context feeding the key and value projections.
    """

    lora: dict[str, list[tuple[dict[str, tuple[Tensor, Tensor]], float]]] = field(default_factory=dict)
    kv: dict[str, list[KvTransform]] = field(default_factory=dict)

    def add_lora(self, site_id: str, pairs: dict[str, tuple[Tensor, Tensor]], scale: float) -> None:
        self.lora.setdefault(site_id, []).append((pairs, scale))

    def add_kv(self, site_id: str, fn: KvTransform) -> None:
        self.kv.setdefault(site_id, []).append(fn)

    def kv_transform(self, site_id: str) -> KvTransform | None:
        fns = self.kv.get(site_id)
        if not fns:
            return None

        def chained(keys: Tensor, values: Tensor):
            for fn in fns:
                keys, values = fn(keys, values)
            return keys, values

        return chained

    def merged(self, other: AdapterSet) -> AdapterSet:
        out = AdapterSet()
        for src in (self, other):
            for site, terms in src.lora.items():
                out.lora.setdefault(site, []).extend(terms)
            for site, fns in src.kv.items():
                out.kv.setdefault(site, []).extend(fns)
        return out


class CrossAttentionSite(Module):
    """Queries from latent features, keys/values from text context.

    Projection matrices are stored [d_out, d_in] so a LoRA delta B @ A has
    the projection's own shape.
    """

    def __init__(self, site_id: str, d_model: int, d_txt: int, heads: int, rng: RngStream):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self._site_id = site_id
        self._heads = heads
        self.w_q = param(he_normal(rng.spawn(0), (d_model, d_model), d_model))
        self.w_k = param(he_normal(rng.spawn(1), (d_model, d_txt), d_txt))
        self.w_v = param(he_normal(rng.spawn(2), (d_model, d_txt), d_txt))
        self.w_o = param(he_normal(rng.spawn(3), (d_model, d_model), d_model, gain=0.5))
        self.b_o = param(np.zeros(d_model))

    @property
    def site_id(self) -> str:
        return self._site_id

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_txt(self) -> int:
        return self.w_k.shape[1]

    def projection(self, name: str) -> Tensor:
        return getattr(self, f"w_{name}")


def _project(x: Tensor, weight: Tensor, proj: str, lora_terms) -> Tensor:
    y = x @ weight.T
    for pairs, scale in lora_terms:
        if proj in pairs and scale != 0:
            a, b = pairs[proj]
            y = y + ((x @ a.T) @ b.T) * scale
    return y


def cross_attention(
    site: CrossAttentionSite,
    x: Tensor,
    context: Tensor,
    mask: np.ndarray | None = None,
    kv_transform: KvTransform | None = None,
    lora=(),
) -> Tensor:
    """Multi-head cross-attention of ``x`` [B, N, d_model] over ``context`` [B, L, d_txt]."""
    if x.ndim != 3 or x.shape[-1] != site.d_model:
        raise ShapeError(f"cross_attention[{site.site_id}]: queries {x.shape} vs d_model {site.d_model}")
    if context.ndim != 3 or context.shape[-1] != site.d_txt or context.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_attention[{site.site_id}]: context {context.shape} vs d_txt {site.d_txt}, batch {x.shape[0]}")
    keys_in, values_in = context, context
    if kv_transform is not None:
        keys_in, values_in = kv_transform(context, context)
        if keys_in.shape != context.shape or values_in.shape != context.shape:
            raise ShapeError(f"cross_attention[{site.site_id}]: kv_transform changed context shape")
    q = _project(x, site.w_q, "q", lora)
    k = _project(keys_in, site.w_k, "k", lora)
    v = _project(values_in, site.w_v, "v", lora)
    out = attend(q, k, v, site.heads, mask)
    return _project(out, site.w_o, "o", lora) + site.b_o
