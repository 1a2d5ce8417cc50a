"""IDX image datasets, per-class subsets, label corruption and minibatch sampling."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .mathcore import PrngState, randint_below, sample_without_replacement, shuffle

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

BUNDLED_DIR = Path(__file__).parent / "datasets" / "mnist5k"


@dataclass(frozen=True)
class RawDataset:
    """Flattened images scaled to [0, 1] with integer labels in ``[0, n_classes)``."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    image_shape: tuple = ()

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 2:
            raise ValueError("images must be a 2-D array (samples x pixels)")
        if len(images) != len(labels):
            raise ValueError("image/label count mismatch")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image_shape", tuple(self.image_shape) or (images.shape[1],))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.images.shape[1]

    def take(self, indices) -> "RawDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return RawDataset(self.images[indices], self.labels[indices], self.n_classes, self.image_shape)


@dataclass(frozen=True)
class NoisyDataset:
    """A dataset whose training labels may differ from the truth.

    ``corrupt_mask`` and ``true_labels`` are evaluation-only: nothing that
    trains or cleans may read them.
    """

    base: RawDataset
    given_labels: np.ndarray
    true_labels: np.ndarray
    corrupt_mask: np.ndarray
    rho: float = field(default=0.0)

    def __post_init__(self):
        given = np.asarray(self.given_labels, dtype=np.int64)
        true = np.asarray(self.true_labels, dtype=np.int64)
        mask = np.asarray(self.corrupt_mask, dtype=bool)
        if not (len(given) == len(true) == len(mask) == self.base.n):
            raise ValueError("label arrays must match the dataset size")
        if not np.array_equal(mask, given != true):
            raise ValueError("corrupt_mask must flag exactly the samples with given != true label")
        for arr in (given, true, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "given_labels", given)
        object.__setattr__(self, "true_labels", true)
        object.__setattr__(self, "corrupt_mask", mask)

    @classmethod
    def clean(cls, ds: RawDataset) -> "NoisyDataset":
        return cls(ds, ds.labels, ds.labels, np.zeros(ds.n, dtype=bool), 0.0)

    @property
    def images(self) -> np.ndarray:
        return self.base.images

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def n_classes(self) -> int:
        return self.base.n_classes

    @property
    def n_corrupt(self) -> int:
        return int(self.corrupt_mask.sum())

    def labels(self, choice: str = "given") -> np.ndarray:
        if choice == "given":
            return self.given_labels
        if choice == "true":
            return self.true_labels
        raise ValueError(f"unknown label choice {choice!r}")

    def take(self, indices) -> "NoisyDataset":
        """Sub-dataset; ``rho`` becomes the corrupt fraction of the selection."""
        indices = np.asarray(indices, dtype=np.int64)
        mask = self.corrupt_mask[indices]
        return NoisyDataset(self.base.take(indices), self.given_labels[indices],
                            self.true_labels[indices], mask,
                            float(mask.mean()) if len(mask) else 0.0)


def as_noisy(ds) -> NoisyDataset:
    return ds if isinstance(ds, NoisyDataset) else NoisyDataset.clean(ds)


# -- IDX files ----------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, magic: int) -> np.ndarray:
    if len(data) < 4 or struct.unpack(">I", data[:4])[0] != magic:
        raise ValueError("unrecognized IDX header")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ValueError("truncated IDX file")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) != header + count:
        raise ValueError(f"truncated IDX file: expected {count} payload bytes, got {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: Optional[int] = None) -> RawDataset:
    """Read an image/label IDX pair (plain or gzip-compressed).

    Pixels are divided by 255.  ``n_classes`` defaults to ``max(label) + 1``.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if labels.ndim != 1:
        raise ValueError("unrecognized IDX header")
    if len(images) != len(labels):
        raise ValueError("image/label count mismatch")
    shape = images.shape[1:]
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    k = n_classes if n_classes is not None else int(labels.max()) + 1 if len(labels) else 0
    return RawDataset(flat, labels.astype(np.int64), k, shape)


def write_idx(ds: RawDataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for datasets whose pixels are multiples of 1/255."""
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    shape = ds.image_shape if len(ds.image_shape) == 2 else (1, ds.d)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, ds.n, *shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, ds.n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_bundled(split: str = "train") -> RawDataset:
    """The packaged 5000-image MNIST extract: ``train`` (400/digit) or ``test`` (100/digit)."""
    prefix = {"train": "train", "test": "t10k"}[split]
    return load_idx(BUNDLED_DIR / f"{prefix}-images-idx3-ubyte.gz",
                    BUNDLED_DIR / f"{prefix}-labels-idx1-ubyte.gz", n_classes=10)


# -- subsets, corruption, minibatches -------------------------------------------

def subset_per_class(ds: RawDataset, per_class: int, state: PrngState) -> RawDataset:
    """``per_class`` samples of every class, chosen without replacement, in shuffled order."""
    chosen = []
    for k in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == k)
        if len(members) < per_class:
            raise ValueError(f"insufficient samples for class {k}")
        pick, _ = sample_without_replacement(len(members), per_class, state.spawn(k))
        chosen.append(members[pick])
    order, _ = shuffle(np.concatenate(chosen).tolist(), state.spawn(ds.n_classes))
    return ds.take(order)


def corrupt_labels(ds: RawDataset, rho: float, state: PrngState) -> NoisyDataset:
    """Relabel exactly ``round(rho * n)`` random samples with a uniformly drawn wrong class."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("invalid noise fraction")
    n_bad = int(np.floor(rho * ds.n + 0.5))
    given = ds.labels.copy()
    if n_bad:
        if ds.n_classes < 2:
            raise ValueError("label corruption needs at least two classes")
        victims, state = sample_without_replacement(ds.n, n_bad, state)
        shift, _ = randint_below(state, np.full(n_bad, ds.n_classes - 1))
        given[victims] = (ds.labels[victims] + 1 + shift) % ds.n_classes
    return NoisyDataset(ds, given, ds.labels, given != ds.labels, rho)


def sample_minibatch(n: int, batch_size: int, state: PrngState) -> np.ndarray:
    """Uniform random ``batch_size``-subset of ``range(n)`` (ensemble probes)."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if batch_size > n:
        raise ValueError("batch larger than dataset")
    return sample_without_replacement(n, batch_size, state)[0]
