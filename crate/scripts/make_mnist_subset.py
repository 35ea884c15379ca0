"""Build the bundled MNIST subset (IDX, gzipped) from the 5k sample shipped with mlxtend.

Usage: pip download mlxtend --no-deps -d /tmp/mlx && python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, arr, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + arr.astype(np.uint8).tobytes())


def main(wheel, out):
    z = zipfile.ZipFile(wheel)
    raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    d = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.int64)
    images, labels = d[:, :-1], d[:, -1]
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train.extend(idx[:400])
        test.extend(idx[400:])
    rng = np.random.default_rng(20240501)
    train = rng.permutation(np.array(train))
    test = rng.permutation(np.array(test))
    for name, sel in (("train", train), ("t10k", test)):
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", images[sel].reshape(-1, 28, 28), 0x00000803)
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", labels[sel], 0x00000801)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
