"""Deterministic 64-bit PRNG used by every stochastic component.

This is SplitMix64 (Steele, Lea & Flood 2014) run in counter mode: draw k
of a stream is ``mix64(stream_seed + (k + 1) * GOLDEN)`` with all
arithmetic mod 2**64. Counter mode makes block generation vectorizable
with numpy uint64 arithmetic, and the fixed constants below guarantee
bit-identical output on every platform, which is the package's
reproducibility contract. Do not swap in ``random`` or ``numpy.random``:
their streams are not part of any stability promise we control.

Streams are derived, not split: ``Rng(seed).derive(tag)`` is a pure
function of (seed, tag), so independent components can pull independent
streams without coordinating draw counts.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4B7C15
MIX_A = 0xBF58476D1CE4E5B9
MIX_B = 0x94D049BB133111EB

_MASK = (1 << 64) - 1
# Largest double below 1.0 is (2**53 - 1) / 2**53; >> 11 keeps the top 53 bits.
_U01 = 2.0**-53


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int (mod 2**64)."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * MIX_A) & _MASK
    x = ((x ^ (x >> 27)) * MIX_B) & _MASK
    return x ^ (x >> 31)


def _mix64_vec(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(MIX_A)
    x ^= x >> np.uint64(27)
    x *= np.uint64(MIX_B)
    x ^= x >> np.uint64(31)
    return x


def _hash_tag(tag: int | str) -> int:
    """FNV-1a over the tag's UTF-8 bytes; integer tags hash their decimal form."""
    h = 0xCBF29CE484222325
    for b in str(tag).encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class Rng:
    """One SplitMix64 counter stream.

    All draw methods advance the counter by a documented amount, so the
    sequence of values is a pure function of (seed, call sequence).
    """

    def __init__(self, seed: int, _stream: int | None = None):
        self.seed = seed & _MASK
        self._stream = self.seed if _stream is None else (_stream & _MASK)
        self._counter = 0

    def derive(self, tag: int | str) -> "Rng":
        """Child stream determined by (seed, tag); never consumes this stream."""
        child = Rng(self.seed, _stream=mix64(self._stream ^ _hash_tag(tag)))
        return child

    def next_u64(self) -> int:
        self._counter += 1
        return mix64((self._stream + self._counter * GOLDEN) & _MASK)

    def u64_block(self, n: int) -> np.ndarray:
        """Next n raw 64-bit values as a uint64 array."""
        if n < 0:
            raise ValueError(f"block size must be nonnegative, got {n}")
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        x = np.uint64(self._stream) + ks * np.uint64(GOLDEN)
        return _mix64_vec(x)

    def random(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * _U01

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * _U01

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Uses floor(u * n); bias < 2**-53 * n."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return int(self.random() * n)

    def randint_range(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        return low + self.randint(high - low + 1)

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs.

        Consumes 2 * ceil(n/2) raw values regardless of parity.
        """
        m = (n + 1) // 2
        # (x >> 11) + 1 lies in [1, 2**53] so u1 is in (0, 1]: log never sees 0.
        u1 = ((self.u64_block(m) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _U01
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def unit_vector(self, d: int) -> np.ndarray:
        """Uniformly random direction on the (d-1)-sphere."""
        while True:
            v = self.normals(d)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n) by argsort of n uniforms (stable on ties)."""
        return np.argsort(self.uniforms(n), kind="stable")
