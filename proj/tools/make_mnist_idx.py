#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_idx.py package/src/digits data/mnist10k

The package stores 10,000 MNIST digits as per-class JSON arrays of floats in
[0, 1] (three decimals). Pixels are mapped back to bytes with round(255 * v)
and the images are interleaved with a fixed permutation so that any prefix
or contiguous split is class-balanced.
"""
import json
import pathlib
import random
import struct
import sys

SIDE = 28


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    src, dst = pathlib.Path(sys.argv[1]), pathlib.Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        for i in range(n):
            px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((bytes(min(255, max(0, round(255 * v))) for v in px), digit))
    random.Random(20230101).shuffle(samples)
    with open(dst / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for px, _ in samples:
            f.write(px)
    with open(dst / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} images to {dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
