"""Plain SGD with epoch shuffling, per-epoch metrics and scheduled ensemble probes."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import NoisyDataset, as_noisy
from .ensemble import (DEFAULT_M, NoiseSpectrum, OrderParams, SplitOrderParams,
                       noise_covariance_spectrum, probe_order_params, probe_split_order_params)
from .mathcore import PrngState, shuffle
from .model import MlpConfig, WeightVector, backprop, init_weights, per_sample_losses, save_checkpoint

log = logging.getLogger(__name__)

# purpose tags for PrngState.stream_id
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_PROBE = 3
STREAM_SPLIT = 4
STREAM_SPECTRUM = 5
STREAM_SUBSET = 6
STREAM_NOISE = 7


class DivergenceError(RuntimeError):
    """Raised when SGD produces a non-finite loss or gradient."""

    def __init__(self, epoch: int, last_good: WeightVector):
        super().__init__(f"divergence detected in epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyper-parameters and instrumentation cadences (all in epochs, 0 = off).

    Cadenced work runs after epoch 1 and after every multiple of its period.
    """

    alpha: float = 0.01
    B: int = 25
    epochs: int = 100
    probe_every: int = 0
    spectrum_every: int = 0
    seed: int = 0
    snapshot_every: int = 0
    checkpoint_every: int = 0
    probe_M: int = DEFAULT_M
    split_probes: bool = True
    spectrum_M: int = 1000
    spectrum_layer: str = "W2"
    spectrum_coverage: float = 0.9
    n_jobs: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        for name in ("probe_every", "spectrum_every", "snapshot_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def on_cadence(epoch: int, every: int) -> bool:
    return every > 0 and (epoch == 1 or epoch % every == 0)


METRIC_COLUMNS = ("epoch", "L", "L_c", "L_w", "eps_tr", "eps_te", "eps_c", "eps_w")
ORDER_COLUMNS = ("A", "A0", "A_par", "A_perp", "D", "D_par", "sigma2_lambda", "R")
SPLIT_COLUMNS = ("A_c", "A_w", "A0_c", "A0_w", "R_cw", "R_ac", "R_aw", "R_c", "R_w")
CSV_COLUMNS = METRIC_COLUMNS + ORDER_COLUMNS + SPLIT_COLUMNS


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    L: float
    L_c: float
    L_w: float
    eps_tr: float
    eps_te: float
    eps_c: float
    eps_w: float
    order: Optional[OrderParams] = None
    split: Optional[SplitOrderParams] = None

    def as_dict(self) -> dict:
        row = {k: getattr(self, k) for k in METRIC_COLUMNS}
        row.update(self.order.as_row() if self.order else dict.fromkeys(ORDER_COLUMNS))
        row.update(self.split.as_row() if self.split else dict.fromkeys(SPLIT_COLUMNS))
        return row


@dataclass(frozen=True)
class LossSnapshot:
    epoch: int
    losses: np.ndarray


@dataclass
class TrainResult:
    weights: WeightVector
    trajectory: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    spectra: dict = field(default_factory=dict)


def format_value(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Append-only CSV with the fixed column set; one flushed line per epoch."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")

    def write(self, row: MetricsRow) -> None:
        d = row.as_dict()
        self._fh.write(",".join(format_value(d[c]) for c in CSV_COLUMNS) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_csv(path) -> list[dict]:
    """Rows of a metrics CSV as dicts of floats (missing values become NaN)."""
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else math.nan) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# -- SGD --------------------------------------------------------------------------

def _epoch_inplace(values, layers, grad, grad_layers, activation, X, y, alpha, B, state):
    order = np.asarray(shuffle(range(len(y)), state)[0])
    with np.errstate(over="ignore", invalid="ignore"):  # reported as divergence instead
        for start in range(0, len(order), B):
            idx = order[start:start + B]
            loss = backprop(layers, activation, X[idx], y[idx], grad_layers)
            if not (math.isfinite(loss) and np.isfinite(grad).all()):
                return False
            values -= alpha * grad
    return True


def sgd_epoch(w: WeightVector, dataset, alpha: float, B: int, state: PrngState) -> WeightVector:
    """One shuffled pass: ``ceil(n/B)`` steps ``w <- w - alpha * grad L^mu``."""
    ds = as_noisy(dataset)
    values = w.values.copy()
    grad = np.empty_like(values)
    ok = _epoch_inplace(values, w.layers(values), grad, w.layers(grad), w.config.activation,
                        ds.images, ds.given_labels, alpha, B, state)
    if not ok:
        raise DivergenceError(0, w)
    return w.with_values(values)


def evaluate(w: WeightVector, noisy: NoisyDataset, test=None) -> dict:
    """Loss and error on the training set (given labels), split by the mask, and on test."""
    losses, pred = per_sample_losses(w, noisy.images, noisy.given_labels)
    wrong = pred != noisy.given_labels
    mask = noisy.corrupt_mask
    out = {"L": float(losses.mean()), "eps_tr": float(wrong.mean())}
    for key, sel in (("c", ~mask), ("w", mask)):
        out[f"L_{key}"] = float(losses[sel].mean()) if sel.any() else math.nan
        out[f"eps_{key}"] = float(wrong[sel].mean()) if sel.any() else math.nan
    if test is not None:
        t = as_noisy(test)
        _, tpred = per_sample_losses(w, t.images, t.true_labels)
        out["eps_te"] = float(np.mean(tpred != t.true_labels))
    else:
        out["eps_te"] = math.nan
    out["losses"] = losses
    return out


def train(config: TrainConfig, model: MlpConfig, noisy_dataset, test_dataset=None, *,
          init: Optional[WeightVector] = None, start_epoch: int = 0,
          metrics_path=None, checkpoint_dir=None,
          on_epoch: Optional[Callable[[MetricsRow], None]] = None) -> TrainResult:
    """Run ``config.epochs`` epochs of SGD and record one :class:`MetricsRow` per epoch.

    ``init``/``start_epoch`` resume a run: epoch ``e`` always shuffles with the
    stream derived from ``(seed, e)``, so resuming from the epoch-``t``
    weights reproduces the uninterrupted run.
    """
    noisy = as_noisy(noisy_dataset)
    if model.n_classes < noisy.n_classes:
        raise ValueError("network output size is smaller than the number of classes")
    seed = config.seed
    w = init if init is not None else init_weights(model, PrngState(seed, STREAM_INIT))
    values = w.values.copy()
    layers, grad = w.layers(values), np.empty_like(values)
    grad_layers = w.layers(grad)
    X, y = noisy.images, noisy.given_labels
    has_split = config.split_probes and 0 < noisy.n_corrupt < noisy.n

    result = TrainResult(weights=w)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if config.snapshot_every and start_epoch == 0:
        result.snapshots.append(LossSnapshot(0, evaluate(w, noisy)["losses"]))
    try:
        for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
            last_good = w
            ok = _epoch_inplace(values, layers, grad, grad_layers, model.activation, X, y,
                                config.alpha, config.B, PrngState(seed, STREAM_SHUFFLE).spawn(epoch))
            if not ok:
                result.weights = last_good
                raise DivergenceError(epoch, last_good)
            w = WeightVector(values, model)
            metrics = evaluate(w, noisy, test_dataset)
            order = split = None
            if on_cadence(epoch, config.probe_every):
                order = probe_order_params(w, noisy, "given", config.B, config.probe_M,
                                           PrngState(seed, STREAM_PROBE).spawn(epoch),
                                           n_jobs=config.n_jobs)
                if has_split:
                    split = probe_split_order_params(w, noisy, config.B, config.probe_M,
                                                     PrngState(seed, STREAM_SPLIT).spawn(epoch),
                                                     n_jobs=config.n_jobs)
            if on_cadence(epoch, config.spectrum_every):
                result.spectra[epoch] = noise_covariance_spectrum(
                    w, noisy, config.B, config.spectrum_M, config.spectrum_layer,
                    config.spectrum_coverage, PrngState(seed, STREAM_SPECTRUM).spawn(epoch),
                    n_jobs=config.n_jobs)
            if on_cadence(epoch, config.snapshot_every):
                result.snapshots.append(LossSnapshot(epoch, metrics["losses"]))
            if on_cadence(epoch, config.checkpoint_every):
                result.checkpoints[epoch] = w
                if ckpt_dir:
                    save_checkpoint(w, ckpt_dir / f"epoch_{epoch:05d}.w")
            row = MetricsRow(epoch, metrics["L"], metrics["L_c"], metrics["L_w"], metrics["eps_tr"],
                             metrics["eps_te"], metrics["eps_c"], metrics["eps_w"], order, split)
            result.trajectory.append(row)
            if writer:
                writer.write(row)
            if on_epoch:
                on_epoch(row)
            log.debug("epoch %d L=%.4g eps_tr=%.4f eps_te=%.4f", epoch, row.L, row.eps_tr, row.eps_te)
    finally:
        if writer:
            writer.close()
    result.weights = w
    return result


# -- trajectory analysis -----------------------------------------------------------

def two_phase_boundary(trajectory, error_threshold: float = 0.005) -> Optional[int]:
    """Epoch of the first row with ``eps_tr <= error_threshold``, or ``None``."""
    if not trajectory:
        raise ValueError("empty trajectory")
    for row in trajectory:
        if row.eps_tr <= error_threshold:
            return row.epoch
    return None


@dataclass(frozen=True)
class Timescales:
    t_m: int
    t_f: int
    eps_m: float
    eps_f: float


LOSS_RULES = ("range", "relative")


def extract_timescales(trajectory, loss_tolerance: float = 0.05, loss_rule: str = "range") -> Timescales:
    """Epoch of minimum test error and epoch where the training loss settles.

    ``t_m`` is the earliest argmin of ``eps_te``.  ``t_f`` is the first epoch
    whose loss is within ``loss_tolerance`` of the final plateau:

    * ``range``: ``L <= min L + tol * (max L - min L)``, i.e. 95% of the total
      loss drop has happened;
    * ``relative``: ``L <= (1 + tol) * min L``.

    Under cross-entropy the loss keeps creeping down roughly like ``1/t`` once
    every sample is fitted, so the relative rule mostly tracks the run length;
    the range rule tracks when memorisation finishes.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    if loss_rule not in LOSS_RULES:
        raise ValueError(f"loss_rule must be one of {LOSS_RULES}")
    eps = np.array([r.eps_te for r in trajectory])
    L = np.array([r.L for r in trajectory])
    i_m = int(np.nanargmin(eps))
    if loss_rule == "range":
        cut = L.min() + loss_tolerance * (L.max() - L.min())
    else:
        cut = (1.0 + loss_tolerance) * L.min()
    i_f = int(np.flatnonzero(L <= cut)[0])
    return Timescales(trajectory[i_m].epoch, trajectory[i_f].epoch, float(eps[i_m]), float(eps[-1]))
