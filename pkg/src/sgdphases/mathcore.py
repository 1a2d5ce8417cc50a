"""Counter-based random numbers, a Jacobi eigensolver and small numeric helpers.

Every random draw in the package is a pure function of
``(master_seed, stream_id, counter)``.  Callers get the successor state back
instead of mutating a generator, so probes evaluated in any order (or on any
number of threads) see the same numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numba
import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arrays wrap silently on overflow
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(_mix64(np.array([x & MASK64], dtype=np.uint64))[0])


@dataclass(frozen=True)
class PrngState:
    """Position in a reproducible random stream.

    ``stream_id`` is a purpose tag (shuffling, probes, initialisation ...);
    distinct tags give unrelated sequences under the same ``master_seed``.
    """

    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id", "counter"):
            value = getattr(self, name)
            if not 0 <= int(value) <= MASK64:
                raise ValueError(f"{name} must fit in 64 bits, got {value}")

    @property
    def _keys(self) -> tuple[int, int]:
        k1 = _mix_int(self.master_seed * _GOLDEN ^ _mix_int(self.stream_id + 0x632BE59BD9B4E019))
        k2 = _mix_int((k1 + 0xD1B54A32D192ED03) ^ (self.stream_id << 1))
        return k1, k2

    def raw(self, n: int) -> tuple[np.ndarray, "PrngState"]:
        """``n`` 64-bit outputs and the advanced state."""
        k1, k2 = self._keys
        ctr = (np.arange(n, dtype=np.uint64) + np.uint64(self.counter & MASK64)) * np.uint64(_GOLDEN)
        out = _mix64(_mix64(ctr + np.uint64(k1)) ^ np.uint64(k2))
        return out, replace(self, counter=(self.counter + n) & MASK64)

    def uniforms(self, n: int) -> tuple[np.ndarray, "PrngState"]:
        """``n`` doubles in [0, 1) and the advanced state."""
        out, nxt = self.raw(n)
        return (out >> np.uint64(11)).astype(np.float64) * _TWO_M53, nxt

    def spawn(self, key: int) -> "PrngState":
        """Independent child stream, e.g. one per epoch or per probe minibatch."""
        return PrngState(self.master_seed, _mix_int(self.stream_id * _GOLDEN ^ _mix_int(key + 1)), 0)


def prng_uniform(state: PrngState) -> tuple[float, PrngState]:
    """One uniform draw in [0, 1); returns ``(value, successor_state)``."""
    u, nxt = state.uniforms(1)
    return float(u[0]), nxt


def randint_below(state: PrngState, bounds: np.ndarray) -> tuple[np.ndarray, PrngState]:
    """Integers ``j_i`` uniform in ``[0, bounds_i)``, one per entry of ``bounds``."""
    bounds = np.asarray(bounds, dtype=np.int64)
    u, nxt = state.uniforms(len(bounds))
    return np.minimum((u * bounds).astype(np.int64), bounds - 1), nxt


def shuffle(indices: Sequence[int], state: PrngState) -> tuple[list, PrngState]:
    """Fisher-Yates permutation of ``indices``; deterministic in ``state``."""
    items = list(indices)
    n = len(items)
    if n == 0:
        raise ValueError("empty permutation")
    js, nxt = randint_below(state, np.arange(n, 1, -1))
    for i, j in zip(range(n - 1, 0, -1), js.tolist()):
        items[i], items[j] = items[j], items[i]
    return items, nxt


def sample_without_replacement(n: int, k: int, state: PrngState) -> tuple[np.ndarray, PrngState]:
    """Uniform random ``k``-subset of ``range(n)`` via a partial Fisher-Yates pass."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} items from {n}")
    pool = np.arange(n)
    js, nxt = randint_below(state, n - np.arange(k))
    for i, j in enumerate(js.tolist()):
        j += i
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k].copy(), nxt


# -- linear algebra ---------------------------------------------------------

def check_symmetric(m: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.size and np.max(np.abs(m - m.T)) > rtol * np.max(np.abs(m)):
        raise ValueError("not symmetric")
    return m


@numba.njit(cache=True)
def _jacobi_sweeps(a, tol, max_sweeps):
    n = a.shape[0]
    tr = 0.0
    fro = 0.0
    for i in range(n):
        tr += a[i, i]
        for j in range(n):
            fro += a[i, j] * a[i, j]
    scale = max(abs(tr), math.sqrt(fro))
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        if math.sqrt(off) <= tol * scale:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[p, k]
                    akq = a[q, k]
                    a[p, k] = c * akp - s * akq
                    a[q, k] = s * akp + c * akq
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                a[p, q] = 0.0
                a[q, p] = 0.0
    return -1


def symmetric_eigenvalues(m, tol: float = 1e-10, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted descending.

    Cyclic Jacobi rotations, row by row.  Sweeps stop once the off-diagonal
    Frobenius norm drops below ``tol`` times the matrix scale (|trace|, or the
    Frobenius norm if that is larger, so traceless inputs still terminate).
    """
    a = check_symmetric(m).copy()
    if a.shape[0] == 0:
        raise ValueError("empty matrix")
    if _jacobi_sweeps(a, tol, max_sweeps) < 0:
        raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.sort(np.diag(a))[::-1].copy()


def normal_pdf(x, mean: float, sd: float):
    """Gaussian density; ``x`` may be a scalar or an array."""
    if not sd > 0:
        raise ValueError("invalid scale")
    z = (np.asarray(x, dtype=np.float64) - mean) / sd
    out = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * sd)
    return float(out) if np.ndim(out) == 0 else out


def normal_logpdf(x, mean: float, sd: float):
    if not sd > 0:
        raise ValueError("invalid scale")
    z = (np.asarray(x, dtype=np.float64) - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * math.log(2.0 * math.pi)
