#!/usr/bin/env python3
"""Lay out MNIST and Fashion-MNIST as IDX files for `lobster --data-dir`.

Sources are the `mnist-data` and `fashion-mnist` npm tarballs (fetch them
with `npm pack mnist-data fashion-mnist`). MNIST ships as the original IDX
files and is copied verbatim. Fashion-MNIST ships as one JSON file per class
without a train/test distinction; the first 6000 samples of every class go to
the training file and the next 1000 to the test file, interleaved
round-robin by class so that the files are not class-sorted.

Usage: prepare_datasets.py <dir-with-tarballs> <output-dir>
"""

import json
import shutil
import struct
import sys
import tarfile
import tempfile
from pathlib import Path

MNIST_FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]
TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def find_tarball(src: Path, prefix: str) -> Path:
    hits = sorted(src.glob(f"{prefix}-[0-9]*.tgz"))
    if not hits:
        sys.exit(f"no {prefix}-*.tgz in {src}")
    return hits[-1]


def write_images(path: Path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(rows), 28, 28))
        for r in rows:
            f.write(bytes(r))


def write_labels(path: Path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        with tarfile.open(find_tarball(src, "mnist-data")) as t:
            t.extractall(tmp / "mnist")
        dst = out / "mnist"
        dst.mkdir(parents=True, exist_ok=True)
        for name in MNIST_FILES:
            shutil.copy(tmp / "mnist" / "package" / "data" / name, dst / name)

        with tarfile.open(find_tarball(src, "fashion-mnist")) as t:
            t.extractall(tmp / "fashion")
        per_class = []
        for c in range(10):
            with open(tmp / "fashion" / "package" / "src" / "clothes" / f"{c}.json") as f:
                # class 0 carries two empty placeholder rows
                rows = [r for r in json.load(f)["data"] if len(r) == 28 * 28]
            assert len(rows) >= TRAIN_PER_CLASS + TEST_PER_CLASS
            per_class.append(rows)
        dst = out / "fashion-mnist"
        dst.mkdir(parents=True, exist_ok=True)
        for split, lo, hi in [("train", 0, TRAIN_PER_CLASS),
                              ("t10k", TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS)]:
            images, labels = [], []
            for i in range(lo, hi):
                for c in range(10):
                    images.append(per_class[c][i])
                    labels.append(c)
            write_images(dst / f"{split}-images-idx3-ubyte", images)
            write_labels(dst / f"{split}-labels-idx1-ubyte", labels)
    print(f"datasets written under {out}")


if __name__ == "__main__":
    main()
