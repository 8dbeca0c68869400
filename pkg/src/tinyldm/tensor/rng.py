"""Counter-based, splittable random streams."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """A Philox stream keyed by ``(seed, stream_id)``.

    Philox is counter-based, so a stream is fully identified by its key and
    counter and two keys never share a sequence. ``spawn`` derives child
    streams deterministically, which is how per-step and per-image
    randomness is split off without consuming the parent.
    """

    def __init__(self, seed: int = 0, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        words = self._gen.bit_generator.state["state"]["counter"]
        return sum(int(w) << (64 * i) for i, w in enumerate(words))

    def spawn(self, index: int) -> RngStream:
        mixed = np.random.SeedSequence([self.seed, self.stream_id, int(index) & _MASK64])
        child_id = int(mixed.generate_state(1, np.uint64)[0])
        return RngStream(self.seed, child_id)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
