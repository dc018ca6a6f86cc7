#!/usr/bin/env python3
"""Rebuild data/mnist10k from the `mnist` npm package (a 10k-digit MNIST subset).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist10k

Pixels are stored in the package as value/255 rounded to three decimals; they are
mapped back to bytes with round(v * 255). Digits are interleaved round-robin so
any prefix of the file is roughly class balanced.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    per_class = []
    for d in range(10):
        with open(src / f"{d}.json") as fh:
            data = json.load(fh)["data"]
        per_class.append([data[i:i + 784] for i in range(0, len(data), 784)])
    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for d in range(10):
            if i < len(per_class[d]):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in per_class[d][i]))
                labels.append(d)
    dst.mkdir(parents=True, exist_ok=True)
    n = len(images)
    with gzip.GzipFile(dst / "train-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, n, 28, 28))
        fh.write(b"".join(images))
    with gzip.GzipFile(dst / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, n))
        fh.write(bytes(labels))
    print(f"wrote {n} examples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
