"""Write the bundled MNIST subset as standard IDX files.

Source: the 5,000-digit MNIST sample (500 per class) that ships inside the
mlxtend wheel (`mlxtend/data/data/mnist_5k.csv.gz`). Each class is split
400/100 into disjoint train/test pools.

    pip download --no-deps mlxtend -d /tmp/pkgs
    python3 scripts/make_mnist_subset.py /tmp/pkgs/mlxtend-*.whl data/mnist-subset
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np

TRAIN_PER_CLASS = 400


def write_images(path, images):
    header = struct.pack(">IIII", 0x00000803, len(images), 28, 28)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    header = struct.pack(">II", 0x00000801, len(labels))
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + labels.astype(np.uint8).tobytes())


def main(wheel, out_dir):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        train_idx.extend(idx[:TRAIN_PER_CLASS])
        test_idx.extend(idx[TRAIN_PER_CLASS:])
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        write_images(f"{out_dir}/{prefix}-images-idx3-ubyte.gz", pixels[idx])
        write_labels(f"{out_dir}/{prefix}-labels-idx1-ubyte.gz", labels[idx])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
