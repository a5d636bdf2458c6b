"""Counter-based splitmix64 generator with Box-Muller normals.

Streams are vectorised: a draw of ``n`` values advances the 64-bit state by
``n`` increments of the golden-ratio constant and mixes each counter value
independently, so results do not depend on how draws are batched.
"""
from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


class Rng:
    """Deterministic random stream.

    ``split(name)`` derives an independent child stream so that, e.g., data
    generation and weight init never share draws.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK
        self._spare: np.ndarray | None = None

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        with np.errstate(over="ignore"):
            counters = np.uint64(self.state) + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
            out = _mix(counters)
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK
        return out

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray | float:
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0) -> np.ndarray | float:
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = (self.next_u64(2 * pairs) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u1 = 1.0 - u[0::2]  # (0, 1]: keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = loc + scale * z[:n]
        return float(z[0]) if size is None else z.reshape(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in ``[low, high)``."""
        u = self.uniform(size)
        out = np.minimum(np.floor(np.asarray(u) * (high - low)).astype(np.int64) + low, high - 1)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        if replace:
            return self.integers(0, n, size)
        return self.permutation(n)[:size]

    def split(self, name: str) -> Rng:
        child = np.uint64((self.state ^ _fnv1a(name)) & _MASK)
        return Rng(int(_mix(np.array([child]))[0]))


def seed_streams(seed: int, names=("data", "init", "noise", "metrics")) -> dict[str, Rng]:
    root = Rng(seed)
    return {name: root.split(name) for name in names}
