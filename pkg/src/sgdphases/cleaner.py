"""Per-sample loss mixtures, cleaning-time detection and the cleaning experiment.

Everything that decides *what to remove* looks only at per-sample losses
against the given labels.  The corruption mask enters solely when scoring
the result (precision, recall and the correct-only reference run).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import NoisyDataset, as_noisy
from .mathcore import PrngState, normal_logpdf, sample_without_replacement
from .model import MlpConfig, init_weights
from .trainer import STREAM_INIT, LossSnapshot, TrainConfig, TrainResult, evaluate, train

VARIANCE_FLOOR = 1e-8
DEFAULT_SNAPSHOT_EVERY = 2
THRESHOLD_RULES = ("midpoint", "equal_pdf")
CLEAN_MODES = ("clean_continue", "clean_retrain", "early_stop")


class ThresholdFallbackWarning(UserWarning):
    """The equal-density threshold had no root between the means; midpoint used."""


@dataclass(frozen=True)
class Gmm1d:
    """``(1-r) N(m_c, s_c^2) + r N(m_w, s_w^2)`` with ``m_c <= m_w``."""

    r: float
    m_c: float
    m_w: float
    s_c: float
    s_w: float
    log_likelihood: float
    iterations: int
    converged: bool
    degenerate: bool = False
    history: tuple = ()

    @property
    def gap(self) -> float:
        return self.m_w - self.m_c

    @property
    def separation(self) -> float:
        """Ashman's D; values above 2 indicate two clearly separate modes."""
        spread = math.sqrt(self.s_c ** 2 + self.s_w ** 2)
        return math.sqrt(2.0) * self.gap / spread if spread > 0 else math.inf

    def component_logpdf(self, x) -> np.ndarray:
        """``(n, 2)`` array of weighted log densities (low, high component)."""
        x = np.asarray(x, dtype=np.float64)
        lo = math.log1p(-self.r) if self.r < 1 else -math.inf
        hi = math.log(self.r) if self.r > 0 else -math.inf
        return np.stack([lo + normal_logpdf(x, self.m_c, self.s_c),
                         hi + normal_logpdf(x, self.m_w, self.s_w)], axis=-1)

    def predict_proba(self, x) -> np.ndarray:
        """Posterior responsibility of the high-loss component."""
        lp = self.component_logpdf(x)
        return np.exp(lp[..., 1] - np.logaddexp(lp[..., 0], lp[..., 1]))


def _log_likelihood_and_resp(x, weights, means, var):
    lp = (np.log(weights)[None, :] - 0.5 * (x[:, None] - means[None, :]) ** 2 / var[None, :]
          - 0.5 * np.log(2.0 * math.pi * var)[None, :])
    norm = np.logaddexp(lp[:, 0], lp[:, 1])
    return float(norm.sum()), np.exp(lp - norm[:, None])


def _em(x, weights, means, var, tol, max_iter):
    ll, resp = _log_likelihood_and_resp(x, weights, means, var)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            break
        weights = nk / len(x)
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk, VARIANCE_FLOOR)
        new_ll, resp = _log_likelihood_and_resp(x, weights, means, var)
        # EM never decreases the likelihood; allow only rounding-level slack
        if new_ll < ll - 1e-9 * max(1.0, abs(ll)):
            raise AssertionError(f"EM log-likelihood decreased at iteration {it}: {ll} -> {new_ll}")
        history.append(new_ll)
        gain, ll = new_ll - ll, new_ll
        if gain < tol:
            converged = True
            break
    return weights, means, var, ll, it, converged, tuple(history)


def fit_gmm_em(losses, tol: Optional[float] = None, max_iter: int = 500,
               state: Optional[PrngState] = None, n_restarts: int = 0) -> Gmm1d:
    """Two-component 1-D Gaussian mixture by EM.

    Starts from a median split (lower/upper half means, pooled within-half
    variance, equal weights).  ``n_restarts`` extra fits start from two data
    points drawn with ``state``; the highest likelihood wins.  ``tol``
    defaults to ``1e-7 * n``.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if len(x) < 4:
        raise ValueError("need at least 4 samples")
    if not np.isfinite(x).all():
        raise ValueError("losses must be finite")
    n = len(x)
    tol = 1e-7 * n if tol is None else tol
    if x.max() == x.min():
        s = math.sqrt(VARIANCE_FLOOR)
        ll = float(n * normal_logpdf(x[0], x[0], s))
        return Gmm1d(0.0, float(x[0]), float(x[0]), s, s, ll, 0, False, True, (ll,))

    xs = np.sort(x)
    lower, upper = xs[: n // 2], xs[n // 2:]
    pooled = (np.sum((lower - lower.mean()) ** 2) + np.sum((upper - upper.mean()) ** 2)) / n
    starts = [np.array([lower.mean(), upper.mean()])]
    if n_restarts:
        if state is None:
            raise ValueError("random restarts need a PrngState")
        for k in range(n_restarts):
            pick, _ = sample_without_replacement(n, 2, state.spawn(k))
            starts.append(np.sort(x[pick]))
    best = None
    for means in starts:
        var0 = np.full(2, max(pooled, VARIANCE_FLOOR))
        fit = _em(x, np.array([0.5, 0.5]), means.astype(np.float64), var0, tol, max_iter)
        if best is None or fit[3] > best[3]:
            best = fit
    weights, means, var, ll, it, converged, history = best
    lo, hi = (0, 1) if means[0] <= means[1] else (1, 0)
    return Gmm1d(float(weights[hi]), float(means[lo]), float(means[hi]),
                 float(math.sqrt(var[lo])), float(math.sqrt(var[hi])),
                 ll, it, converged, False, history)


def mixture_gap(gmm: Gmm1d) -> float:
    return gmm.m_w - gmm.m_c


def detect_cleaning_time(gap_trajectory: Sequence[tuple], patience: int = 5,
                         rule: str = "online") -> Optional[int]:
    """Epoch at which the mixture gap peaks.

    ``offline`` is the plain argmax (earliest on ties).  ``online`` fires once
    the gap has failed to beat its running maximum for ``patience``
    consecutive snapshots and returns the epoch of that maximum, or ``None``
    if it never fires.
    """
    traj = [(int(e), float(g)) for e, g in gap_trajectory]
    if rule == "offline":
        if not traj:
            raise ValueError("insufficient history")
        return traj[int(np.argmax([g for _, g in traj]))][0]
    if rule != "online":
        raise ValueError("rule must be 'online' or 'offline'")
    if len(traj) < patience + 1:
        raise ValueError("insufficient history")
    best_epoch, best, stale = traj[0][0], traj[0][1], 0
    for epoch, g in traj[1:]:
        if g > best:
            best_epoch, best, stale = epoch, g, 0
        else:
            stale += 1
            if stale >= patience:
                return best_epoch
    return None


def cleaning_threshold(gmm: Gmm1d, rule: str = "midpoint", tol: float = 1e-10) -> float:
    """Loss above which samples are treated as mislabeled.

    ``equal_pdf`` bisects for the point between the means where the two
    weighted component densities cross; without a sign change it warns
    (:class:`ThresholdFallbackWarning`) and returns the midpoint.
    """
    if rule not in THRESHOLD_RULES:
        raise ValueError(f"rule must be one of {THRESHOLD_RULES}")
    if gmm.degenerate:
        raise ValueError("degenerate mixture has no threshold")
    mid = 0.5 * (gmm.m_c + gmm.m_w)
    if rule == "midpoint":
        return mid

    def diff(l):
        lp = gmm.component_logpdf(l)
        return float(lp[0] - lp[1])

    lo, hi = gmm.m_c, gmm.m_w
    f_lo, f_hi = diff(lo), diff(hi)
    if not (lo < hi and f_lo > 0 > f_hi):
        warnings.warn("no density crossing between the component means; using the midpoint",
                      ThresholdFallbackWarning, stacklevel=2)
        return mid
    while hi - lo > tol:
        m = 0.5 * (lo + hi)
        if diff(m) > 0:
            lo = m
        else:
            hi = m
    return 0.5 * (lo + hi)


# -- planning -----------------------------------------------------------------------

@dataclass(frozen=True)
class CleanerConfig:
    threshold_rule: str = "midpoint"
    t_c_rule: str = "offline"
    patience: int = 5
    em_tol: Optional[float] = None
    max_iter: int = 500
    n_restarts: int = 0
    min_separation: float = 2.0
    l_c_override: Optional[float] = None

    def __post_init__(self):
        if self.threshold_rule not in THRESHOLD_RULES:
            raise ValueError(f"threshold_rule must be one of {THRESHOLD_RULES}")
        if self.t_c_rule not in ("online", "offline"):
            raise ValueError("t_c_rule must be 'online' or 'offline'")


@dataclass(frozen=True)
class CleaningPlan:
    t_c: int
    gmm: Gmm1d
    l_c: float
    removed: np.ndarray
    degenerate: bool
    threshold_fallback: bool
    fits: tuple  # (epoch, Gmm1d) per snapshot


def fit_snapshots(snapshots: Sequence[LossSnapshot], cfg: CleanerConfig = CleanerConfig(),
                  state: PrngState = PrngState(0, 8)) -> list:
    return [(s.epoch, fit_gmm_em(s.losses, cfg.em_tol, cfg.max_iter, state.spawn(s.epoch), cfg.n_restarts))
            for s in snapshots]


def plan_cleaning(snapshots: Sequence[LossSnapshot], cfg: CleanerConfig = CleanerConfig(),
                  state: PrngState = PrngState(0, 8)) -> CleaningPlan:
    """Pick ``t_c`` and ``l_c`` from loss snapshots and list the samples to drop.

    Only snapshots taken after some training (epoch > 0) are considered.

    A fit at ``t_c`` that is degenerate, or whose modes are not separated
    (Ashman's D below ``min_separation``), removes nothing.
    """
    # before any training both groups share one loss distribution, so epoch 0
    # (kept for plotting) is never a candidate
    snapshots = [s for s in snapshots if s.epoch > 0]
    if not snapshots:
        raise ValueError("no loss snapshots after epoch 0")
    fits = fit_snapshots(snapshots, cfg, state)
    gaps = [(e, g.gap) for e, g in fits]
    t_c = None
    if cfg.t_c_rule == "online" and len(gaps) > cfg.patience:
        t_c = detect_cleaning_time(gaps, cfg.patience, "online")
    if t_c is None:
        t_c = detect_cleaning_time(gaps, rule="offline")
    gmm = dict(fits)[t_c]
    losses = next(s.losses for s in snapshots if s.epoch == t_c)
    fallback = False
    if cfg.l_c_override is not None:
        degenerate, l_c = False, float(cfg.l_c_override)
    else:
        degenerate = gmm.degenerate or gmm.separation < cfg.min_separation
        if degenerate:
            l_c = math.inf
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ThresholdFallbackWarning)
                l_c = cleaning_threshold(gmm, cfg.threshold_rule)
            fallback = any(issubclass(w.category, ThresholdFallbackWarning) for w in caught)
    removed = np.flatnonzero(np.asarray(losses) > l_c)
    return CleaningPlan(t_c, gmm, l_c, removed, degenerate, fallback, tuple(fits))


# -- the experiment ------------------------------------------------------------------

@dataclass
class CleaningReport:
    mode: str
    t_c: int
    l_c: float
    n: int
    kept: int
    removed: int
    precision: float
    recall: float
    a_n: float
    a_c: float
    a_p: float
    Q: float
    degenerate: bool
    threshold_rule: str
    threshold_fallback: bool
    r: float
    m_c: float
    m_w: float
    s_c: float
    s_w: float
    removed_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    curves: dict = field(default_factory=dict, repr=False)
    gaps: list = field(default_factory=list, repr=False)
    snapshots: list = field(default_factory=list, repr=False)  # uncleaned run
    trajectory: list = field(default_factory=list, repr=False)  # uncleaned run

    SCALARS = ("mode", "t_c", "l_c", "n", "kept", "removed", "precision", "recall", "a_n", "a_c",
               "a_p", "Q", "degenerate", "threshold_rule", "threshold_fallback",
               "r", "m_c", "m_w", "s_c", "s_w")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.SCALARS}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "undefined" if math.isnan(v) else repr(v)
    return str(v)


def write_report(report: CleaningReport, path, removed_path=None) -> None:
    """``key=value`` lines; optionally a one-column CSV of removed sample indices."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k, v in report.as_dict().items():
            fh.write(f"{k}={_fmt(v)}\n")
    if removed_path is not None:
        with open(removed_path, "w", newline="") as fh:
            fh.write("sample\n")
            for i in report.removed_indices.tolist():
                fh.write(f"{i}\n")


def write_snapshots_csv(snapshots: Sequence[LossSnapshot], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "sample", "loss"))
        for s in snapshots:
            for i, l in enumerate(s.losses.tolist()):
                w.writerow((s.epoch, i, repr(l)))


def read_snapshots_csv(path) -> list[LossSnapshot]:
    by_epoch: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_epoch.setdefault(int(row["epoch"]), []).append((int(row["sample"]), float(row["loss"])))
    out = []
    for epoch in sorted(by_epoch):
        pairs = sorted(by_epoch[epoch])
        out.append(LossSnapshot(epoch, np.array([l for _, l in pairs])))
    return out


def _accuracy_curve(result: TrainResult) -> list:
    return [(r.epoch, 1.0 - r.eps_te) for r in result.trajectory]


def detection_scores(removed: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Precision and recall of ``removed`` against the corruption mask.

    An empty denominator scores 1.0: nothing was claimed (precision) or
    there was nothing to find (recall).
    """
    hit = int(mask[removed].sum()) if len(removed) else 0
    precision = hit / len(removed) if len(removed) else 1.0
    recall = hit / int(mask.sum()) if mask.any() else 1.0
    return precision, recall


def quality(a_n: float, a_c: float, a_p: float) -> float:
    """``(a_c - a_n) / (a_p - a_n)``; NaN when the reference run is no better."""
    return (a_c - a_n) / (a_p - a_n) if a_p > a_n else math.nan


def clean_and_continue(config: TrainConfig, model: MlpConfig, noisy_dataset, test_dataset,
                       mode: str = "clean_continue", cleaner: CleanerConfig = CleanerConfig()
                       ) -> CleaningReport:
    """Train on noisy labels, clean at ``t_c``, and score against two twin runs.

    All three runs (uncleaned, cleaned, correct-only) share the seed and the
    epoch budget ``config.epochs``; accuracies are test accuracies at the end
    of the budget (at ``t_c`` for ``early_stop``).
    """
    if mode not in CLEAN_MODES:
        raise ValueError(f"mode must be one of {CLEAN_MODES}")
    noisy: NoisyDataset = as_noisy(noisy_dataset)
    every = config.snapshot_every or DEFAULT_SNAPSHOT_EVERY
    base_cfg = replace(config, probe_every=0, spectrum_every=0, snapshot_every=0, checkpoint_every=0)
    run_n = train(replace(base_cfg, snapshot_every=every, checkpoint_every=every), model, noisy, test_dataset)
    plan = plan_cleaning(run_n.snapshots, cleaner, PrngState(config.seed, 8))
    t_c = plan.t_c
    a_n = 1.0 - run_n.trajectory[-1].eps_te
    keep = np.setdiff1d(np.arange(noisy.n), plan.removed)
    cleaned = noisy.take(keep)

    curve_n = _accuracy_curve(run_n)
    if mode == "early_stop":
        if t_c > 0:
            a_c = 1.0 - run_n.trajectory[t_c - 1].eps_te
        else:
            a_c = 1.0 - evaluate(init_weights(model, PrngState(config.seed, STREAM_INIT)),
                                 noisy, test_dataset)["eps_te"]
        curve_c = [(e, a) for e, a in curve_n if e <= t_c]
    elif mode == "clean_retrain":
        run_c = train(base_cfg, model, cleaned, test_dataset)
        a_c = 1.0 - run_c.trajectory[-1].eps_te
        curve_c = _accuracy_curve(run_c)
    else:
        remaining = config.epochs - t_c
        if remaining > 0:
            init = run_n.checkpoints[t_c] if t_c > 0 else None
            run_c = train(replace(base_cfg, epochs=remaining), model, cleaned, test_dataset,
                          init=init, start_epoch=t_c)
            a_c = 1.0 - run_c.trajectory[-1].eps_te
            curve_c = [(e, a) for e, a in curve_n if e <= t_c] + _accuracy_curve(run_c)
        else:
            a_c, curve_c = a_n, curve_n

    correct = noisy.take(np.flatnonzero(~noisy.corrupt_mask))
    run_p = train(base_cfg, model, correct, test_dataset)
    a_p = 1.0 - run_p.trajectory[-1].eps_te

    precision, recall = detection_scores(plan.removed, noisy.corrupt_mask)
    g = plan.gmm
    return CleaningReport(
        mode, t_c, plan.l_c, noisy.n, len(keep), len(plan.removed), precision, recall,
        a_n, a_c, a_p, quality(a_n, a_c, a_p), plan.degenerate, cleaner.threshold_rule,
        plan.threshold_fallback, g.r, g.m_c, g.m_w, g.s_c, g.s_w,
        removed_indices=plan.removed,
        curves={"a_n": curve_n, "a_c": curve_c, "a_p": _accuracy_curve(run_p)},
        gaps=[(e, f.m_c, f.m_w, f.r) for e, f in plan.fits],
        snapshots=run_n.snapshots, trajectory=run_n.trajectory)
