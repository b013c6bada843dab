"""Portable counter-based SplitMix64 random stream.

Draw ``i`` (1-based, counting from the generator's creation) is the SplitMix64
finalizer applied to ``seed + i * GOLDEN_GAMMA`` modulo 2**64, so any slice of
the stream can be produced in one vectorized call and reproduced exactly by
other implementations:

    z = seed + i * 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

Uniforms are ``(z >> 11) * 2**-53``. Normals use the Box-Muller transform on
consecutive uniform pairs ``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
followed by the matching ``sin`` value.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def _key_words(key):
    if isinstance(key, str):
        raw = key.encode("utf-8")
        raw = raw.ljust(-(-len(raw) // 8) * 8 or 8, b"\0")
        return [len(key)] + [int.from_bytes(raw[i:i + 8], "little") for i in range(0, len(raw), 8)]
    return [int(key)]


def derive_seed(seed: int, *keys: int | str) -> int:
    """Child seed for an independent sub-stream, e.g. ``derive_seed(7, "dropout", 3)``.

    Each key is folded in as 64-bit words (strings: byte length, then UTF-8
    bytes in zero-padded little-endian 8-byte chunks), one finalizer round
    per word.
    """
    state = int(seed) & _MASK
    for key in keys:
        for word in _key_words(key):
            state = (state ^ (word & _MASK)) & _MASK
            state = int(_mix(np.array([state], dtype=np.uint64) + GOLDEN_GAMMA)[0])
    return state


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(np.uint64(self.seed) + idx * GOLDEN_GAMMA)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), scale=1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((m, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()[:n]
        return scale * z.reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")
