"""Counter-based random streams addressed by ``(master seed, purpose tag, index)``.

Each substream is a Philox generator whose key is a hash of the address, so
draws never depend on call order, thread count or platform.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(master: int, tag: str, index: int) -> int:
    """128-bit Philox key derived from the stream address."""
    h = hashlib.blake2b(digest_size=16, person=b"meltlab-rng")
    h.update(struct.pack("<Q", master & _MASK64))
    h.update(tag.encode("utf-8"))
    h.update(b"\x00")
    h.update(struct.pack("<q", index))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Uniform and Gaussian draws from one addressed substream."""

    def __init__(self, master: int, tag: str, index: int = 0):
        self.master = int(master) & _MASK64
        self.tag = tag
        self.index = int(index)
        self._gen = np.random.Generator(np.random.Philox(key=stream_key(self.master, tag, self.index)))

    def uniform(self, size=None) -> np.ndarray:
        """Uniforms in ``[0, 1)``."""
        return self._gen.random(size)

    def normal(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """A 63-bit child seed for an independent run, addressed like a stream."""
    return stream_key(master, tag, index) & ((1 << 63) - 1)


def rng_stream(master: int, tag: str, index: int = 0) -> RngStream:
    return RngStream(master, tag, index)
