"""Build the desk-scale MNIST subset shipped under data/mnist/.

The canonical MNIST mirrors are not reachable from the build sandbox, so the
raw IDX files come from the npm package ``mnist-data`` 1.2.6, which vendors
them unchanged (MD5 of the uncompressed files below).

* train: 10,000 images drawn without replacement from the 60k training split
  (seed 20251017), kept in the drawn order.
* test: the canonical 10k test split, untouched.

Usage::

    npm pack mnist-data && tar xzf mnist-data-1.2.6.tgz
    python scripts/make_mnist_subset.py package/data data/mnist
"""
from __future__ import annotations

import gzip
import hashlib
import struct
import sys
from pathlib import Path

import numpy as np

EXPECTED_MD5 = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte": "27ae3e4e09519cfbb04c329615203637",
}
TRAIN_SIZE = 10_000
SEED = 20251017


def read_raw(src: Path, name: str) -> np.ndarray:
    blob = (src / name).read_bytes()
    if hashlib.md5(blob).hexdigest() != EXPECTED_MD5[name]:
        raise SystemExit(f"{name}: checksum mismatch")
    if "images" in name:
        _, n, rows, cols = struct.unpack(">IIII", blob[:16])
        return np.frombuffer(blob, np.uint8, offset=16).reshape(n, rows, cols)
    _, n = struct.unpack(">II", blob[:8])
    return np.frombuffer(blob, np.uint8, offset=8)


def write_idx(path: Path, images: np.ndarray, labels: np.ndarray, stem: str) -> None:
    n, rows, cols = images.shape
    with gzip.GzipFile(path / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(images.tobytes())
    with gzip.GzipFile(path / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())


def main(src_dir: str, out_dir: str) -> None:
    src = Path(src_dir)
    train_x = read_raw(src, "train-images-idx3-ubyte")
    train_y = read_raw(src, "train-labels-idx1-ubyte")
    pick = np.random.default_rng(SEED).choice(len(train_y), TRAIN_SIZE, replace=False)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out, train_x[pick], train_y[pick], "train")
    write_idx(out, read_raw(src, "t10k-images-idx3-ubyte"), read_raw(src, "t10k-labels-idx1-ubyte"), "test")
    print(f"train {TRAIN_SIZE}  test 10000  -> {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
