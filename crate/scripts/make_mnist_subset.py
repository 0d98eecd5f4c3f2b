"""Build a stratified 2000/1000 MNIST subset in IDX format.

Source: the 5000-digit MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz; 784 pixel columns then the label).

    pip download mlxtend==0.24.0 --no-deps -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data/mnist
"""

import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 100
SEED = 20240101
MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + b"".join(struct.pack(">I", d) for d in array.shape)
    path.write_bytes(header + array.tobytes())


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :784], table[:, 784]
    rng = np.random.default_rng(SEED)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.extend(idx[:TRAIN_PER_CLASS])
        test.extend(idx[TRAIN_PER_CLASS : TRAIN_PER_CLASS + TEST_PER_CLASS])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", rng.permutation(train)), ("t10k", rng.permutation(test))):
        write_idx(out / f"{name}-images-idx3-ubyte", pixels[idx].reshape(-1, 28, 28))
        write_idx(out / f"{name}-labels-idx1-ubyte", labels[idx])
        print(f"{name}: {len(idx)} items")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
