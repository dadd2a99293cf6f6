"""Counter-based random number generation.

Every stochastic component takes an explicit :class:`RngState`; there is no
global RNG. The state is a (seed, counter) pair backed by the Philox
counter-based generator, so identical seed plus identical call sequence
reproduces the identical stream regardless of how many values earlier calls
consumed: each call runs in its own counter block.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RngState"]


class RngState:
    """Deterministic random stream owned by the caller.

    Each draw method consumes one counter block (2**192 Philox states), so
    the amount of randomness one call pulls never shifts later calls.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def _next_gen(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bitgen)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next_gen().uniform(low, high, size=shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._next_gen().normal(mean, std, size=shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high), matching numpy's convention."""
        return self._next_gen().integers(low, high, size=size)

    def random(self) -> float:
        return float(self._next_gen().random())

    def permutation(self, n: int) -> np.ndarray:
        return self._next_gen().permutation(n)

    def fork(self) -> "RngState":
        """Derive an independent child stream (e.g. for a data loader)."""
        child_seed = int(self._next_gen().integers(0, 2**63))
        return RngState(child_seed)
