#!/usr/bin/env python3
"""Convert the digit JSON files of the npm `mnist` package into IDX files.

Usage: mnist_from_npm.py <package/src/digits dir> <out dir> [--mini N]

The npm package ships 10000 MNIST digits as 0..9.json, each holding a flat
list of 784-pixel images in [0,1]. Images are interleaved by class so any
prefix of the output is class-balanced.
"""
import json
import struct
import sys
from pathlib import Path


def write_idx(out_dir, stem, images, labels):
    with open(out_dir / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, round(v * 255))) for v in img))
    with open(out_dir / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src = Path(sys.argv[1])
    out = Path(sys.argv[2])
    mini = int(sys.argv[4]) if len(sys.argv) > 4 and sys.argv[3] == "--mini" else None
    per_class = []
    for d in range(10):
        flat = json.load(open(src / f"{d}.json"))["data"]
        per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])
    images, labels = [], []
    k = 0
    while any(k < len(c) for c in per_class):
        for d in range(10):
            if k < len(per_class[d]):
                images.append(per_class[d][k])
                labels.append(d)
        k += 1
    if mini is not None:
        images, labels = images[:mini], labels[:mini]
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out, "train", images, labels)
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main()
