#!/usr/bin/env python3
"""Rebuild IDX-format MNIST files from the digit JSON shipped in the npm `mnist` package.

Usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The JSON stores intensities rounded to three decimals; multiplying by 255 and
rounding recovers the original bytes exactly (1/255 > 0.002).
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TEST_PER_CLASS = 100


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload.tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        rows = np.round(flat * 255.0).astype(np.uint8).reshape(-1, 784)
        images.append(rows)
        labels.append(np.full(len(rows), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    # stratified test split: the first TEST_PER_CLASS shuffled examples of each class
    rank = np.zeros(len(labels), dtype=int)
    seen = np.zeros(10, dtype=int)
    for i, y in enumerate(labels):
        rank[i] = seen[y]
        seen[y] += 1
    is_test = rank < TEST_PER_CLASS

    dst.mkdir(parents=True, exist_ok=True)
    for name, mask in (("t10k", is_test), ("train", ~is_test)):
        x, y = images[mask], labels[mask]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(y), 28, 28), x)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(y),), y)
        print(name, len(y), np.bincount(y, minlength=10).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
