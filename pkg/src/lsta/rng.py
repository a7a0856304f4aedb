"""Deterministic, splittable pseudorandom generator.

The generator is a counter-based SplitMix64: draw ``i`` of a stream seeded
with ``s`` is ``mix64(s + (i+1) * GOLDEN)`` where ``mix64`` is the standard
SplitMix64 finalizer and ``GOLDEN = 0x9E3779B97F4A7C15``. Because each output
depends only on (seed, counter), draws are random-access, vectorize cleanly,
and reproduce bit-exactly on every platform. Substreams are derived by
hashing a label into the seed, so independent components (per-clip, per-step,
per-parameter) can draw without coordinating counters.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x00000100000001B3)

_U53_SCALE = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, elementwise on uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fold_key(key) -> np.uint64:
    """Hash an int/str/bytes/tuple stream label to a uint64 (FNV-1a over
    bytes; tuples fold elementwise in order)."""
    if isinstance(key, (int, np.integer)):
        return np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF)
    if isinstance(key, tuple):
        h = np.uint64(len(key)) ^ _FNV_OFFSET
        for element in key:
            h = _mix64(np.asarray([h ^ _fold_key(element)], dtype=np.uint64))[0]
        return h
    if isinstance(key, str):
        key = key.encode("utf-8")
    if not isinstance(key, (bytes, bytearray)):
        raise TypeError(f"stream label must be int, str, bytes, or tuple, got {type(key)!r}")
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in key:
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


class Rng:
    """Stateful view over a SplitMix64 counter stream.

    Identical (seed, draw sequence) pairs produce identical bits everywhere;
    `split` derives an independent stream so sibling consumers never share
    counters.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def u64(self, n: int) -> np.ndarray:
        """Next `n` raw uint64 draws."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.seed + idx * _GOLDEN)

    def u64_scalar(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, shape=None) -> np.ndarray:
        """float64 draws in [0, 1), using the top 53 bits."""
        shape = () if shape is None else shape
        n = int(np.prod(shape)) if shape != () else 1
        x = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        return x.reshape(shape) if shape != () else x[0]

    def normal(self, shape=None) -> np.ndarray:
        """Standard normal draws via Box-Muller on uniform pairs."""
        shape = () if shape is None else shape
        n = int(np.prod(shape)) if shape != () else 1
        half = (n + 1) // 2
        # u1 in (0, 1] so log is finite; u2 in [0, 1)
        raw = self.u64(2 * half)
        u1 = ((raw[:half] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53_SCALE
        u2 = (raw[half:] >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape != () else z[0]

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        """Uniform integers in [lo, hi). Modulo reduction; the bias is
        ~(hi-lo)/2**64 and irrelevant at artifact scales."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        shape = () if shape is None else shape
        n = int(np.prod(shape)) if shape != () else 1
        span = np.uint64(hi - lo)
        x = (self.u64(n) % span).astype(np.int64) + lo
        return x.reshape(shape) if shape != () else int(x[0])

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]

    def split(self, key) -> "Rng":
        """Independent substream for `key`; does not advance this stream."""
        with np.errstate(over="ignore"):
            folded = _fold_key(key) * _GOLDEN + np.uint64(1)
            child = _mix64(np.asarray([self.seed ^ folded], dtype=np.uint64))[0]
        return Rng(int(child))

    def __repr__(self):
        return f"Rng(seed={int(self.seed)}, counter={self._counter})"
