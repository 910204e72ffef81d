"""Counter-based random numbers for per-ray reproducibility.

Every random draw in the renderer/trainer is a pure function of
(seed, stream, ray_index, draw_index), so chunked or multithreaded
execution produces exactly the same numbers as a sequential run.
"""

from __future__ import annotations

import numpy as np

# Stream ids keep draws for different purposes statistically independent.
STREAM_STRATIFIED = 1
STREAM_IMPORTANCE = 2
STREAM_BATCH = 3

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C_STREAM = np.uint64(0xD1342543DE82EF95)
_C_DRAW = np.uint64(0x2545F4914F6CDD1D)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, stream: int, ray_index, count: int) -> np.ndarray:
    """Uniform [0,1) draws, shape (len(ray_index), count).

    `ray_index` may be a scalar or an integer array; draws depend only on
    the (seed, stream, ray, draw) counter tuple.
    """
    rays = np.atleast_1d(np.asarray(ray_index, dtype=np.uint64))
    draws = np.arange(count, dtype=np.uint64)
    base = np.uint64((int(seed) * int(_GOLDEN) + int(stream) * int(_C_STREAM)) & 0xFFFFFFFFFFFFFFFF)
    z = base + rays[:, None] * _M2 + draws[None, :] * _C_DRAW
    bits = _mix(z) >> np.uint64(11)
    return bits.astype(np.float64) * (2.0 ** -53)


class RaySampleRng:
    """numpy.Generator-like adapter bound to one (seed, stream, ray)."""

    def __init__(self, seed: int, stream: int, ray_index: int):
        self._seed = seed
        self._stream = stream
        self._ray = ray_index
        self._cursor = 0

    def random(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        base = uniforms(self._seed, self._stream + (self._cursor << 20), self._ray, n)
        self._cursor += 1
        if size is None:
            return float(base[0, 0])
        return base[0].reshape(size)
