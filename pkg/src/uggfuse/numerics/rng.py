"""Counter-based deterministic randomness.

Every draw site owns a named stream keyed by (seed, stream-id); each call
advances an explicit counter, so state is three integers, serializes exactly,
and two processes with equal (seed, stream, counter) produce identical bits.
Built on numpy's Philox generator, which is counter-addressable by design.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ContractViolationError

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


def stream_id_for(name: str) -> int:
    """Stable 64-bit stream id derived from a stream name."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """One independent random stream addressed by (seed, stream_id, counter).

    The counter increments once per draw call regardless of output size;
    each call runs a fresh Philox block cipher keyed by (seed, stream_id)
    with the call index in the high counter word, so calls never overlap.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        for label, v in (("seed", seed), ("stream_id", stream_id), ("counter", counter)):
            if not isinstance(v, (int, np.integer)) or int(v) < 0 or int(v) > _MASK64:
                raise ContractViolationError(f"{label} must be a u64, got {v!r}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.counter = int(counter)

    @classmethod
    def named(cls, seed: int, name: str, counter: int = 0) -> "RngStream":
        return cls(seed, stream_id_for(name), counter)

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream_id, self.counter)

    @classmethod
    def from_state(cls, state) -> "RngStream":
        seed, stream_id, counter = state
        return cls(seed, stream_id, counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=_U64)
        ctr = np.array([0, 0, 0, self.counter], dtype=_U64)
        gen = np.random.Generator(np.random.Philox(counter=ctr, key=key))
        self.counter += 1
        return gen

    # -- draw calls (each advances the counter exactly once) ---------------

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def normal(self, loc: float, scale: float, shape=()) -> np.ndarray:
        return self._generator().normal(loc, scale, shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator().choice(n, size=size, replace=replace)


def seeded_rng(seed: int, name: str) -> RngStream:
    """Convenience constructor for a named stream at counter 0."""
    return RngStream.named(seed, name)
