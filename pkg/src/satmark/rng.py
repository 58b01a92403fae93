"""Deterministic counter-based random streams.

Everything random in this package flows through splitmix64. A Stream is a
(seed, counter) pair; value i of a stream depends only on (seed, i), so any
consumer can be resumed bit-exactly by reconstructing the stream and never
needs to replay draws it did not make. Normals come from Box-Muller.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_DERIVE_SALT = 0xD6E8FEB86659FD93


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int (mod 2**64)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def derive(seed: int, *tags: int | str) -> int:
    """Derive a child seed from a parent seed and a tag path.

    Tags may be ints (e.g. a step index) or short strings (a purpose label).
    The same (seed, tags) always yields the same child seed; distinct tag
    paths decorrelate. Used for per-step / per-sample substreams.
    """
    h = mix64((seed & MASK64) ^ _DERIVE_SALT)
    for tag in tags:
        if isinstance(tag, str):
            data = tag.encode()
            h = mix64(h ^ len(data) ^ _GOLDEN)
            for i in range(0, len(data), 8):
                h = mix64(h ^ int.from_bytes(data[i : i + 8], "little"))
        else:
            h = mix64(h ^ (int(tag) & MASK64) ^ _GOLDEN)
    return h


class Stream:
    """Counter-based splitmix64 stream with vectorized draws."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words as a uint64 array."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        return _mix_array(states)

    def uniforms(self, n: int) -> np.ndarray:
        """n float64 uniforms in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(lo + (hi - lo) * self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """n float64 standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 in (0, 1], no log(0)
        ang = (2.0 * np.pi) * u2
        out = np.concatenate([r * np.cos(ang), r * np.sin(ang)])
        return out[:n]

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """n ints uniform over [lo, hi). Modulo reduction; the bias is
        ~range/2**64 and irrelevant at the ranges used here."""
        if hi <= lo:
            raise ValueError("empty integer range")
        span = np.uint64(hi - lo)
        return (self.u64(n) % span).astype(np.int64) + lo

    def integer(self, lo: int, hi: int) -> int:
        return int(self.integers(lo, hi, 1)[0])


def stream(seed: int, *tags: int | str) -> Stream:
    """Stream seeded by derive(seed, *tags)."""
    return Stream(derive(seed, *tags) if tags else seed)
