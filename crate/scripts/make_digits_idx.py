#!/usr/bin/env python3
"""Build the bundled digit corpus (IDX format) from the `mnist` npm package.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_digits_idx.py package/src/digits data/digits

Each class file holds a flat list of 28x28 grayscale values scaled to [0,1].
The first TRAIN_PER_CLASS images of every class go to the train split and the
next TEST_PER_CLASS to the test split. Samples are interleaved by class so the
files are not sorted by label.
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100
SIDE = 28


def load_class(src: Path, digit: int):
    values = json.loads((src / f"{digit}.json").read_text())["data"]
    pixels = bytes(min(255, max(0, round(v * 255))) for v in values)
    n = len(pixels) // (SIDE * SIDE)
    return [pixels[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)]


def write_idx(path: Path, images, labels):
    with open(path.with_name(path.name + "-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(path.with_name(path.name + "-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    per_class = [load_class(src, d) for d in range(10)]
    for split, lo, hi in (("train", 0, TRAIN_PER_CLASS),
                          ("test", TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS)):
        images, labels = [], []
        for i in range(lo, hi):
            for d in range(10):
                images.append(per_class[d][i])
                labels.append(d)
        write_idx(dst / split, images, labels)
        print(split, len(images))


if __name__ == "__main__":
    main()
