"""SplitMix64 streams.

Every random draw in the package goes through :class:`PrngStream`, so a run is
reproducible from ``(seed, index)`` alone on any IEEE-754 platform.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)

# Named sub-streams so that attack, defense and data draws never overlap.
PURPOSES = {
    "data": 0x01,
    "encoder": 0x02,
    "attack": 0x03,
    "defense": 0x04,
    "target": 0x05,
    "probe": 0x06,
}


def splitmix_mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class PrngStream:
    """A SplitMix64 generator with vectorised block draws.

    ``next_u64`` and the block methods share one counter, so drawing ``n``
    values at once is bitwise identical to drawing them one at a time.
    """

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & _MASK

    @classmethod
    def derive(cls, seed: int, index: int = 0, purpose: str | None = None) -> "PrngStream":
        seed &= _MASK
        if purpose is not None:
            seed = splitmix_mix(seed ^ (PURPOSES[purpose] * GOLDEN))
        return cls(splitmix_mix(seed ^ ((GOLDEN * index) & _MASK)))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & _MASK
        return splitmix_mix(self.state)

    def u64_block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix_array(states)
        self.state = (self.state + n * GOLDEN) & _MASK
        return out

    def random(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def random_block(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.u64_block(n) >> np.uint64(11)
        return (bits.astype(np.float64) * _INV_2_53).reshape(shape)

    def uniform(self, lo: float, hi: float, shape=None):
        if shape is None:
            return lo + (hi - lo) * self.random()
        return lo + (hi - lo) * self.random_block(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller, two uniforms per value."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random_block((n, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (r * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)

    def integer(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        return int(self.random() * n)


def uniform(stream: PrngStream, lo: float, hi: float) -> float:
    return stream.uniform(lo, hi)


def sign_noise(stream: PrngStream, shape, eps: float) -> np.ndarray:
    """Uniform noise in ``[-eps, eps]`` filled in row-major order."""
    if eps == 0:
        return np.zeros(shape)
    return stream.uniform(-eps, eps, shape)
