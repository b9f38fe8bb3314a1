"""Low-level numerics: dense matmul with shape checking, a counter-based
seeded RNG, and a central finite-difference gradient checker.

All floating point work is float64. The RNG is a SplitMix64-style
counter-based generator: the state is just (seed, position), so streams
are bit-exact across platforms and trivially serializable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(2**53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """Counter-based RNG. `pos` counts raw 64-bit words drawn so far."""

    seed: int
    pos: int = 0

    def u64(self, n: int) -> np.ndarray:
        ctr = np.arange(self.pos + 1, self.pos + n + 1, dtype=np.uint64)
        self.pos += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + ctr * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """i.i.d. uniform samples in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) / _U53

    def standard_normal(self, n: int) -> np.ndarray:
        """Box-Muller; consumes 2n words regardless of parity of n."""
        u = self.uniform(2 * n).reshape(2, n)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0]))
        return r * np.cos(2.0 * np.pi * u[1])

    def integers(self, n: int, upper: int) -> np.ndarray:
        """n i.i.d. integers in [0, upper)."""
        if upper < 1:
            raise ValueError(f"upper must be >= 1, got {upper}")
        return np.minimum((self.uniform(n) * upper).astype(np.int64), upper - 1)

    def state(self) -> dict:
        return {"seed": int(self.seed), "pos": int(self.pos)}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(seed=int(state["seed"]), pos=int(state["pos"]))


def bernoulli_vector(p: np.ndarray, rng: Rng) -> np.ndarray:
    """Sample a 0/1 vector with success probabilities `p`.

    Entries with p=0 are 0 and p=1 are 1 deterministically (the uniform
    samples lie in [0, 1)).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p must be a vector")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"probabilities outside [0,1]: {p}")
    u = rng.uniform(p.size)
    return (u < p).astype(np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite entries in matmul result")
    return out


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp = f(x + e)
        fm = f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
