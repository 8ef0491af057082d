#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package into IDX files.

The package ships 10,000 grayscale MNIST digits as per-class JSON arrays of
784 floats in [0, 1]. This writes a deterministic 8,000 / 2,000 train/test
split in the standard IDX layout (big-endian, magic 2051 / 2049).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 8000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = data[k * 784:(k + 1) * 784]
            samples.append((digit, [min(255, max(0, round(v * 255))) for v in px]))
    random.Random(20180101).shuffle(samples)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(dst / "train-images-idx3-ubyte", [s[1] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte", [s[0] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte", [s[1] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [s[0] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
