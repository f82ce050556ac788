#!/usr/bin/env python3
"""Build the bundled datasets under data/.

digits.csv      8x8 digits from scikit-learn's bundled copy (64 pixel columns
                in 0..16, label in the last column, with a header row).
mnist10k-*.gz   10,000 MNIST digits (1,000 per class) converted from the
                `mnist` npm package (JSON, pixels in [0,1]) to gzipped IDX.

usage: prepare_data.py [path/to/npm-mnist-package]
"""
import gzip
import json
import os
import struct
import sys

import numpy as np

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")


def digits():
    import sklearn.datasets as ds

    src = os.path.join(os.path.dirname(ds.__file__), "data", "digits.csv.gz")
    raw = np.loadtxt(src, delimiter=",")
    with open(os.path.join(ROOT, "digits.csv"), "w") as fh:
        fh.write(",".join([f"p{i}" for i in range(64)] + ["label"]) + "\n")
        for row in raw:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    print("digits:", raw.shape)


def mnist(pkg):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as fh:
            data = json.load(fh)["data"]
        n = len(data) // 784
        arr = np.rint(np.asarray(data, dtype=np.float64).reshape(n, 784) * 255.0)
        images.append(np.clip(arr, 0, 255).astype(np.uint8))
        labels.append(np.full(n, digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    with gzip.GzipFile(os.path.join(ROOT, "mnist10k-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, images.shape[0], 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(os.path.join(ROOT, "mnist10k-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, labels.shape[0]))
        fh.write(labels.tobytes())
    print("mnist:", images.shape)


if __name__ == "__main__":
    os.makedirs(ROOT, exist_ok=True)
    digits()
    if len(sys.argv) > 1:
        mnist(sys.argv[1])
