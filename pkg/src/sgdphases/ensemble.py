"""Order parameters of the minibatch gradient ensemble at a frozen weight point.

All probes take the exact full-dataset gradient as the ensemble mean and
reduce per-minibatch quantities in minibatch-index order, so the result does
not depend on how many worker threads computed the gradients.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .data import as_noisy, sample_minibatch
from .mathcore import PrngState, symmetric_eigenvalues
from .model import WeightVector, loss_and_gradient

log = logging.getLogger(__name__)

DEFAULT_M = 200
MAX_EXHAUSTIVE = 10_000


@dataclass(frozen=True)
class OrderParams:
    A: float
    A0: float
    A_par: float
    A_perp: float
    D: float
    D_par: float
    sigma2_lambda: float
    R: float
    M: int
    B: int
    n_zero: int = 0  # members with a zero gradient, left out of R

    def as_row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("M", "B", "n_zero")}


@dataclass(frozen=True)
class SplitOrderParams:
    norm_gc: float
    norm_gw: float
    A_c: float
    A_w: float
    A0_c: float
    A0_w: float
    A0: float
    R_cw: float
    R_ac: float
    R_aw: float
    rho: float
    B_c: int
    B_w: int
    A: float = math.nan  # whole-ensemble activity composed from the parts
    R_c: float = math.nan  # alignment within the clean sub-ensemble
    R_w: float = math.nan

    def as_row(self) -> dict:
        keys = ("A_c", "A_w", "A0_c", "A0_w", "R_cw", "R_ac", "R_aw", "R_c", "R_w")
        return {k: getattr(self, k) for k in keys}


@dataclass(frozen=True)
class NoiseSpectrum:
    eigenvalues: np.ndarray
    D_total: float
    D_s: int
    coverage: float
    layer_tag: str
    M: int

    def rows(self) -> Iterator[tuple[int, float, float]]:
        """``(rank, eigenvalue, cumulative fraction of D_total)``, rank from 1."""
        cum = np.cumsum(self.eigenvalues)
        denom = self.D_total if self.D_total > 0 else 1.0
        for rank, (e, c) in enumerate(zip(self.eigenvalues, cum), start=1):
            yield rank, float(e), float(c / denom)


# -- gradient streaming ---------------------------------------------------------

def iter_minibatch_gradients(w: WeightVector, X: np.ndarray, y: np.ndarray,
                             batches: Sequence[np.ndarray], n_jobs: int = 1,
                             columns: Optional[slice] = None) -> Iterator[np.ndarray]:
    """Yield ``grad L^mu`` for each batch, in batch order, optionally sliced to ``columns``."""
    def one(idx):
        g = loss_and_gradient(w, X[idx], y[idx])[1]
        return g if columns is None else g[columns].copy()

    if n_jobs <= 1:
        for idx in batches:
            yield one(idx)
        return
    chunk = 4 * n_jobs
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        for start in range(0, len(batches), chunk):
            yield from pool.map(one, batches[start:start + chunk])


def draw_minibatches(n: int, B: int, M: int, state: PrngState) -> list[np.ndarray]:
    """``M`` independent uniform ``B``-subsets; member ``m`` uses its own sub-stream."""
    if M < 2:
        raise ValueError("ensemble needs M >= 2")
    return [sample_minibatch(n, B, state.spawn(m)) for m in range(M)]


def enumerate_minibatches(n: int, B: int) -> list[np.ndarray]:
    """Every ``B``-subset of ``range(n)`` (the exhaustive ensemble)."""
    if math.comb(n, B) > MAX_EXHAUSTIVE:
        raise ValueError(f"C({n},{B}) exceeds {MAX_EXHAUSTIVE} minibatches")
    return [np.array(c) for c in itertools.combinations(range(n), B)]


class _Accumulator:
    """Running sums for A, lambda moments and the unit-vector sum behind R."""

    def __init__(self, g: np.ndarray):
        self.g = g
        self.A0 = float(g @ g)
        self.count = 0
        self.sq = 0.0
        self.lam = 0.0
        self.lam_sq = 0.0
        self.lam_dev_sq = 0.0
        self.unit_sum = np.zeros_like(g)
        self.n_unit = 0

    def add(self, gm: np.ndarray) -> None:
        sq = float(gm @ gm)
        self.count += 1
        self.sq += sq
        if self.A0 > 0:
            lam = float(gm @ self.g) / self.A0
            self.lam += lam
            self.lam_sq += lam * lam
            self.lam_dev_sq += (lam - 1.0) ** 2
        if sq > 0:
            self.unit_sum += gm / math.sqrt(sq)
            self.n_unit += 1

    @property
    def A(self) -> float:
        return self.sq / self.count

    @property
    def R(self) -> float:
        m = self.n_unit
        if m < 2:
            return math.nan
        s = float(self.unit_sum @ self.unit_sum)
        return (s - m) / (m * (m - 1))


def order_params_from_batches(w: WeightVector, dataset, batches: Sequence[np.ndarray],
                              labels_choice: str = "given", segment: Optional[str] = None,
                              n_jobs: int = 1) -> OrderParams:
    """Order parameters over an explicit list of minibatches.

    With ``segment`` (a layer tag such as ``"W2"``) every vector is restricted
    to that block of weights before any norm or projection is taken.
    """
    ds = as_noisy(dataset)
    X, y = ds.images, ds.labels(labels_choice)
    cols = w.segment(segment) if segment else slice(None)
    g = loss_and_gradient(w, X, y)[1][cols]
    acc = _Accumulator(g)
    if acc.A0 == 0.0:
        raise ValueError("zero mean gradient")
    for gm in iter_minibatch_gradients(w, X, y, batches, n_jobs, cols):
        acc.add(gm)
    if acc.count < 2:
        raise ValueError("ensemble needs M >= 2")
    n_zero = acc.count - acc.n_unit
    if n_zero:
        log.warning("%d minibatch gradients were zero and are excluded from R", n_zero)
    A, A0 = acc.A, acc.A0
    A_par = acc.lam_sq / acc.count * A0
    sigma2 = acc.lam_dev_sq / acc.count
    return OrderParams(A=A, A0=A0, A_par=A_par, A_perp=A - A_par, D=A - A0,
                       D_par=sigma2 * A0, sigma2_lambda=sigma2, R=acc.R,
                       M=acc.count, B=len(batches[0]), n_zero=n_zero)


def probe_order_params(w: WeightVector, dataset, labels_choice: str = "given", B: int = 25,
                       M: int = DEFAULT_M, state: PrngState = PrngState(0, 7),
                       segment: Optional[str] = None, n_jobs: int = 1) -> OrderParams:
    """Monte-Carlo order parameters from ``M`` random ``B``-subsets."""
    ds = as_noisy(dataset)
    if B > ds.n:
        raise ValueError("batch larger than dataset")
    batches = draw_minibatches(ds.n, B, M, state)
    return order_params_from_batches(w, ds, batches, labels_choice, segment, n_jobs)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.nan
    return float(a @ b / (na * nb))


def split_sizes(B: int, rho: float) -> tuple[int, int]:
    b_c = int(math.floor((1.0 - rho) * B + 0.5))
    b_c = min(max(b_c, 1), B - 1)
    return b_c, B - b_c


def probe_split_order_params(w: WeightVector, noisy_dataset, B: int = 25, M: int = DEFAULT_M,
                             state: PrngState = PrngState(0, 8), n_jobs: int = 1) -> SplitOrderParams:
    """Order parameters of the clean and mislabeled sub-ensembles.

    ``g_c`` and ``g_w`` are exact subset means; ``A_c`` and ``A_w`` are
    estimated from ``M`` sub-batches of fixed sizes ``B_c`` and ``B_w``
    drawn independently from each subset.  ``rho`` is the realised corrupt
    fraction ``N_w / N``, so ``(1 - rho) g_c + rho g_w`` is the full gradient.
    """
    ds = as_noisy(noisy_dataset)
    clean = np.flatnonzero(~ds.corrupt_mask)
    bad = np.flatnonzero(ds.corrupt_mask)
    if len(clean) == 0 or len(bad) == 0:
        raise ValueError("degenerate split")
    rho = len(bad) / ds.n
    b_c, b_w = split_sizes(B, rho)
    if b_c > len(clean) or b_w > len(bad):
        raise ValueError("degenerate split")
    X, y = ds.images, ds.given_labels

    g_c = loss_and_gradient(w, X[clean], y[clean])[1]
    g_w = loss_and_gradient(w, X[bad], y[bad])[1]
    if not np.any(g_c) or not np.any(g_w):
        raise ValueError("zero subset gradient")
    g = (1.0 - rho) * g_c + rho * g_w

    parts = []
    for subset, size, center, tag in ((clean, b_c, g_c, 0), (bad, b_w, g_w, 1)):
        batches = [subset[b] for b in draw_minibatches(len(subset), size, M, state.spawn(tag))]
        acc = _Accumulator(center)
        for gm in iter_minibatch_gradients(w, X, y, batches, n_jobs):
            acc.add(gm)
        parts.append(acc)

    norm_c, norm_w = float(np.linalg.norm(g_c)), float(np.linalg.norm(g_w))
    r_cw = _cos(g_c, g_w)
    A_c, A_w = parts[0].A, parts[1].A
    A = (1 - rho) ** 2 * A_c + rho ** 2 * A_w + 2 * rho * (1 - rho) * norm_c * norm_w * r_cw
    return SplitOrderParams(
        norm_gc=norm_c, norm_gw=norm_w, A_c=A_c, A_w=A_w,
        A0_c=(1 - rho) ** 2 * norm_c ** 2, A0_w=rho ** 2 * norm_w ** 2, A0=float(g @ g),
        R_cw=r_cw, R_ac=_cos(g, g_c), R_aw=_cos(g, g_w), rho=rho, B_c=b_c, B_w=b_w,
        A=A, R_c=parts[0].R, R_w=parts[1].R)


def effective_dimension(eigenvalues: np.ndarray, total: float, coverage: float) -> int:
    """Smallest ``m`` whose top-``m`` eigenvalues reach ``coverage * total``."""
    if total <= 0:
        return 0
    cum = np.cumsum(eigenvalues)
    hits = np.flatnonzero(cum >= coverage * total)
    return int(hits[0]) + 1 if len(hits) else len(eigenvalues)


def spectrum_from_deviations(dev: np.ndarray, layer_tag: str, coverage: float) -> NoiseSpectrum:
    """Spectrum of ``(1/M) sum dev dev^T`` for an ``M x n_s`` matrix of centred gradients.

    Uses the ``M x M`` Gram matrix when ``M < n_s``; its nonzero eigenvalues
    coincide with the covariance's, the remaining ``n_s - M`` are zero.
    """
    M, n_s = dev.shape
    if M < n_s:
        mat = dev @ dev.T / M
    else:
        mat = dev.T @ dev / M
    mat = 0.5 * (mat + mat.T)
    total = float(np.trace(mat))
    eig = symmetric_eigenvalues(mat)
    if len(eig) < n_s:
        eig = np.sort(np.concatenate([eig, np.zeros(n_s - len(eig))]))[::-1]
    return NoiseSpectrum(eig, total, effective_dimension(eig, total, coverage), coverage, layer_tag, M)


def noise_covariance_spectrum(w: WeightVector, dataset, B: int = 25, M: int = DEFAULT_M,
                              layer_tag: str = "W2", coverage: float = 0.9,
                              state: PrngState = PrngState(0, 9), labels_choice: str = "given",
                              n_jobs: int = 1, batches: Optional[Sequence[np.ndarray]] = None
                              ) -> NoiseSpectrum:
    """Eigenvalues of the minibatch-gradient covariance restricted to one weight block."""
    ds = as_noisy(dataset)
    cols = w.segment(layer_tag)
    X, y = ds.images, ds.labels(labels_choice)
    if batches is None:
        if B > ds.n:
            raise ValueError("batch larger than dataset")
        batches = draw_minibatches(ds.n, B, M, state)
    g = loss_and_gradient(w, X, y)[1][cols]
    dev = np.stack(list(iter_minibatch_gradients(w, X, y, batches, n_jobs, cols))) - g
    return spectrum_from_deviations(dev, layer_tag, coverage)
