"""Build the bundled MNIST-5k IDX files from the copy shipped inside the mlxtend wheel.

Usage: python scripts/make_mnist5k.py path/to/mlxtend-*.whl

Writes 400 samples per digit to train-* and the remaining 100 per digit to
t10k-*, gzip-compressed, under src/sgdphases/datasets/mnist5k/.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "sgdphases" / "datasets" / "mnist5k"
TRAIN_PER_CLASS = 400


def write_idx(prefix, images, labels):
    with gzip.GzipFile(OUT / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        fh.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(OUT / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def main(wheel):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    images, labels = table[:, :-1], table[:, -1].astype(int)
    train, test = [], []
    for k in range(10):
        idx = np.flatnonzero(labels == k)
        train.extend(idx[:TRAIN_PER_CLASS])
        test.extend(idx[TRAIN_PER_CLASS:])
    train, test = np.sort(train), np.sort(test)
    OUT.mkdir(parents=True, exist_ok=True)
    write_idx("train", images[train], labels[train])
    write_idx("t10k", images[test], labels[test])
    print(f"train={len(train)} test={len(test)} -> {OUT}")


if __name__ == "__main__":
    main(sys.argv[1])
