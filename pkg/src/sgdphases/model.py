"""Fully-connected softmax classifier on a flat parameter vector.

Parameters are stored layer by layer: the weight matrix of layer ``l``
(``rows = fan_out``, ``cols = fan_in``, row-major) followed by its bias of
length ``rows``.  Every gradient returned here lives in the same coordinates.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import NoisyDataset, as_noisy
from .mathcore import PrngState

ACTIVATIONS = ("relu", "tanh", "sigmoid")
INIT_RULES = ("fan_in_scaled", "uniform_fixed")
UNIFORM_FIXED_SCALE = 0.1
LOG_PROB_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple = (784, 30, 30, 10)
    activation: str = "relu"
    init_scale_rule: str = "fan_in_scaled"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("layer_sizes needs at least an input and an output layer of positive size")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.init_scale_rule not in INIT_RULES:
            raise ValueError(f"init_scale_rule must be one of {INIT_RULES}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


class Segment(NamedTuple):
    layer: int  # 1-based
    offset: int
    rows: int
    cols: int

    @property
    def bias_offset(self) -> int:
        return self.offset + self.rows * self.cols

    @property
    def end(self) -> int:
        return self.bias_offset + self.rows


def segment_map(layer_sizes: Sequence[int]) -> list[Segment]:
    segments, offset = [], 0
    for layer, (cols, rows) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:]), start=1):
        segments.append(Segment(layer, offset, rows, cols))
        offset += rows * cols + rows
    return segments


@dataclass(frozen=True, eq=False)
class WeightVector:
    """The network's ``N_p`` parameters plus the architecture that reads them."""

    values: np.ndarray
    config: MlpConfig = field(default_factory=MlpConfig)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.config.n_params,):
            raise ValueError(f"expected {self.config.n_params} parameters, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_params(self) -> int:
        return len(self.values)

    @property
    def segment_map(self) -> list[Segment]:
        return segment_map(self.config.layer_sizes)

    def layers(self, values: np.ndarray | None = None):
        """``(W, b)`` views for every layer, over ``values`` (default: own)."""
        v = self.values if values is None else values
        return [(v[s.offset:s.bias_offset].reshape(s.rows, s.cols), v[s.bias_offset:s.end])
                for s in self.segment_map]

    def segment(self, tag: str) -> slice:
        """Index range for ``W<l>``, ``b<l>``, ``layer<l>`` (weights + bias) or ``all``."""
        if tag == "all":
            return slice(0, self.n_params)
        match = re.fullmatch(r"(W|b|layer)(\d+)", tag)
        segs = self.segment_map
        if not match or not 1 <= int(match.group(2)) <= len(segs):
            raise ValueError("unknown layer tag")
        seg = segs[int(match.group(2)) - 1]
        kind = match.group(1)
        if kind == "W":
            return slice(seg.offset, seg.bias_offset)
        if kind == "b":
            return slice(seg.bias_offset, seg.end)
        return slice(seg.offset, seg.end)

    def with_values(self, values: np.ndarray) -> "WeightVector":
        return WeightVector(values, self.config)

    def __eq__(self, other):
        return (isinstance(other, WeightVector) and self.config == other.config
                and np.array_equal(self.values, other.values))


def init_weights(config: MlpConfig, state: PrngState) -> WeightVector:
    """Uniform weights (``±sqrt(6/fan_in)`` or ``±0.1``) and zero biases."""
    values = np.zeros(config.n_params)
    for seg in segment_map(config.layer_sizes):
        if config.init_scale_rule == "fan_in_scaled":
            bound = math.sqrt(6.0 / seg.cols)
        else:
            bound = UNIFORM_FIXED_SCALE
        u, _ = state.spawn(seg.layer).uniforms(seg.rows * seg.cols)
        values[seg.offset:seg.bias_offset] = bound * (2.0 * u - 1.0)
    return WeightVector(values, config)


# -- activations --------------------------------------------------------------

def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def _forward(w: WeightVector, X: np.ndarray):
    """Pre-activations, activations and output log-probabilities."""
    act = w.config.activation
    layers = w.layers()
    zs, acts = [], [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        zs.append(z)
        if i < len(layers) - 1:
            a = _act(act, z)
            acts.append(a)
    logits = zs[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return zs, acts, logp


def _as_batch(w: WeightVector, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != w.config.layer_sizes[0]:
        raise ValueError("input size mismatch")
    return X


def predict_log_proba(w: WeightVector, X) -> np.ndarray:
    return _forward(w, _as_batch(w, X))[2]


def forward(w: WeightVector, x) -> np.ndarray:
    """Softmax class probabilities for one input vector (or a batch of rows)."""
    p = np.exp(predict_log_proba(w, x))
    return p[0] if np.ndim(x) == 1 else p


class SampleLoss(NamedTuple):
    loss: float
    predicted_class: int
    correct: bool


def per_sample_losses(w: WeightVector, X, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy (natural log, probability floored at 1e-12) and argmax class per row."""
    logp = predict_log_proba(w, X)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= w.config.n_classes):
        raise ValueError("label out of range")
    picked = logp[np.arange(len(labels)), labels]
    return -np.maximum(picked, LOG_PROB_FLOOR), logp.argmax(axis=1)


def per_sample_loss(w: WeightVector, x, label: int) -> SampleLoss:
    losses, pred = per_sample_losses(w, np.atleast_2d(x), [label])
    return SampleLoss(float(losses[0]), int(pred[0]), bool(pred[0] == label))


def backprop(layers, activation: str, X: np.ndarray, y: np.ndarray, grad_layers) -> float:
    """Mean loss over ``X``; writes the gradient into the ``grad_layers`` views.

    ``layers`` and ``grad_layers`` are ``(W, b)`` views as returned by
    :meth:`WeightVector.layers`; the trainer calls this directly on a mutable
    buffer to avoid per-step allocation.
    """
    n_layers = len(layers)
    zs, acts = [], [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W.T
        z += b
        zs.append(z)
        if i < n_layers - 1:
            a = _act(activation, z)
            acts.append(a)
    logits = zs[-1]
    logits -= logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    norm = prob.sum(axis=1, keepdims=True)
    rows = np.arange(len(y))
    picked = logits[rows, y] - np.log(norm[:, 0])
    loss = float(-np.maximum(picked, LOG_PROB_FLOOR).mean())

    delta = prob / norm
    delta[rows, y] -= 1.0
    delta /= len(y)
    for i in range(n_layers - 1, -1, -1):
        gW, gb = grad_layers[i]
        np.dot(delta.T, acts[i], out=gW)
        np.sum(delta, axis=0, out=gb)
        if i:
            delta = (delta @ layers[i][0]) * _act_grad(activation, zs[i - 1], acts[i])
    return loss


def loss_and_gradient(w: WeightVector, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the rows of ``X`` and its exact gradient."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty minibatch")
    X = _as_batch(w, X)
    grad = np.empty(w.n_params)
    loss = backprop(w.layers(), w.config.activation, X, y, w.layers(grad))
    return loss, grad


def minibatch_loss_and_gradient(w: WeightVector, dataset, indices, label_choice: str = "given"):
    """``(L^mu, grad L^mu)`` over the samples ``indices`` of ``dataset``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("empty minibatch")
    ds = as_noisy(dataset)
    return loss_and_gradient(w, ds.images[indices], ds.labels(label_choice)[indices])


MASK_FILTERS = ("all", "clean_only", "corrupt_only")


def dataset_loss_error(w: WeightVector, dataset, label_choice: str = "given",
                       mask_filter: str = "all") -> tuple[float, float]:
    """Mean loss and misclassification rate over a (mask-filtered) dataset."""
    ds: NoisyDataset = as_noisy(dataset)
    if mask_filter == "all":
        keep = np.ones(ds.n, dtype=bool)
    elif mask_filter == "clean_only":
        keep = ~ds.corrupt_mask
    elif mask_filter == "corrupt_only":
        keep = ds.corrupt_mask
    else:
        raise ValueError(f"mask_filter must be one of {MASK_FILTERS}")
    if not keep.any():
        raise ValueError("empty evaluation subset")
    labels = ds.labels(label_choice)[keep]
    losses, pred = per_sample_losses(w, ds.images[keep], labels)
    return float(losses.mean()), float(np.mean(pred != labels))


# -- checkpoints --------------------------------------------------------------

_HEADER = "sgdphases-weights v1"


def save_checkpoint(w: WeightVector, path) -> None:
    """One text header line, then ``N_p`` little-endian float64 values."""
    cfg = w.config
    header = (f"{_HEADER} layer_sizes={','.join(map(str, cfg.layer_sizes))} "
              f"activation={cfg.activation} init={cfg.init_scale_rule}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(w.values.astype("<f8").tobytes())


def load_checkpoint(path) -> WeightVector:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    header = raw[:nl].decode("ascii", errors="replace") if nl >= 0 else ""
    if not header.startswith(_HEADER):
        raise ValueError(f"{path}: not a weight checkpoint")
    fields = dict(tok.split("=", 1) for tok in header[len(_HEADER):].split())
    cfg = MlpConfig(tuple(int(s) for s in fields["layer_sizes"].split(",")),
                    fields.get("activation", "relu"), fields.get("init", "fan_in_scaled"))
    payload = raw[nl + 1:]
    if len(payload) != 8 * cfg.n_params:
        raise ValueError(f"{path}: expected {cfg.n_params} parameters, found {len(payload) / 8:g}")
    return WeightVector(np.frombuffer(payload, dtype="<f8"), cfg)
