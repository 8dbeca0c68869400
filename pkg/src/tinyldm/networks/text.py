from __future__ import annotations

import numpy as np

from ..tensor import Tensor, embedding, silu
from ..tensor.rng import RngStream
from .attention import attend
from .layers import LayerNorm, Linear, Module, param


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, rng: RngStream):
        self._heads = heads
        self.norm1 = LayerNorm(dim)
        self.to_q = Linear(dim, dim, rng.spawn(0), bias=False)
        self.to_k = Linear(dim, dim, rng.spawn(1), bias=False)
        self.to_v = Linear(dim, dim, rng.spawn(2), bias=False)
        self.to_out = Linear(dim, dim, rng.spawn(3), gain=0.5)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 2 * dim, rng.spawn(4))
        self.fc2 = Linear(2 * dim, dim, rng.spawn(5), gain=0.5)

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = x + self.to_out(attend(self.to_q(h), self.to_k(h), self.to_v(h), self._heads, key_mask))
        return x + self.fc2(silu(self.fc1(self.norm2(x))))


class TextEncoder(Module):
    """Token + position embeddings through a small pre-norm transformer.

    Keys at pad positions are masked, so outputs never depend on how much
    padding follows the last real token.
    """

    def __init__(self, vocab_size: int, dim: int, max_len: int, layers: int, heads: int, rng: RngStream, pad_id: int = 0):
        self._pad_id = pad_id
        self._max_len = max_len
        self.token_embedding = param(rng.spawn(0).normal((vocab_size, dim)))
        self.position_embedding = param(rng.spawn(1).normal((max_len, dim)) * np.float32(0.1))
        self.blocks = [TransformerBlock(dim, heads, rng.spawn(10 + i)) for i in range(layers)]
        self.final_norm = LayerNorm(dim)

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def max_len(self) -> int:
        return self._max_len

    def key_mask(self, ids: np.ndarray) -> np.ndarray:
        return np.asarray(ids) != self._pad_id

    def append_rows(self, rows: np.ndarray) -> list[int]:
        """Grow the embedding table; returns the new ids."""
        rows = np.atleast_2d(np.asarray(rows, dtype=self.token_embedding.dtype))
        start = self.vocab_size
        old = self.token_embedding
        self.token_embedding = Tensor(np.concatenate([old.data, rows]), requires_grad=True, name=old.name)
        return list(range(start, start + len(rows)))

    def __call__(self, ids) -> tuple[Tensor, np.ndarray]:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] > self._max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds maximum {self._max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)].ravel()[0]
            raise IndexError(f"token id {int(bad)} outside vocabulary of {self.vocab_size}")
        mask = self.key_mask(ids)
        if not mask.any(axis=1).all():
            raise ValueError("every sequence needs at least one non-pad token")
        x = embedding(self.token_embedding, ids) + self.position_embedding[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, mask)
        return self.final_norm(x), mask
