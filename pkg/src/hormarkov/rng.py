"""Counter-based random numbers.

Every uniform is a pure function of ``(seed, path, step, purpose, attempt,
slot)`` computed by chained SplitMix64 finalizers, so any subset of paths
can be generated in any order, on any number of workers, and reproduce the
same numbers bit for bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_TWO53 = 2.0**-53


def _mix(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _absorb(h, k):
    with np.errstate(over="ignore"):
        return _mix(h ^ _mix(np.asarray(k, dtype=np.uint64) + _GAMMA))


def hash_uniform(seed, *keys) -> np.ndarray:
    """Uniforms in the open interval (0, 1) keyed by broadcastable integer keys."""
    h = _mix(np.asarray([seed], dtype=np.uint64) + _GAMMA)
    for k in keys:
        h = _absorb(h, k)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO53


class StepStream:
    """Uniform and normal draws for a set of paths at one grid step.

    Parameters
    ----------
    seed : int
        Master seed.
    paths : array of int
        Global path indices handled by this stream.
    step : int
        Grid step number (1-based for noise at time ``step * delta``).
    """

    def __init__(self, seed: int, paths, step: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.paths = np.asarray(paths, dtype=np.uint64)
        self.step = int(step)

    def __len__(self):
        return len(self.paths)

    def uniform(self, purpose: int, n: int, attempt: int = 0, rows=None) -> np.ndarray:
        p = self.paths if rows is None else self.paths[rows]
        slots = np.arange(n, dtype=np.uint64)[None, :]
        # scalar keys first so only the last two absorptions run at batch size
        return hash_uniform(self.seed, self.step, purpose, attempt, p[:, None], slots)

    def normal(self, purpose: int, n: int, attempt: int = 0, rows=None) -> np.ndarray:
        return ndtri(self.uniform(purpose, n, attempt, rows))


def path_seed(seed: int, index: int) -> int:
    """Derived 64-bit seed for one path, for provenance records."""
    return int(_absorb(_mix(np.asarray([seed], dtype=np.uint64) + _GAMMA), index)[0])
