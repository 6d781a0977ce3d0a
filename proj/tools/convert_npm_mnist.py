#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

The npm package (https://github.com/cazala/mnist) bundles roughly ten thousand
MNIST digits as pixel/255 values rounded to three decimals, grouped by class.
This script re-quantizes them to bytes, makes a deterministic per-class 80/20
train/test split, shuffles each split with a fixed seed and writes gzipped
IDX files readable by the dataset loader here (and by torchvision).

usage: convert_npm_mnist.py <package-dir> <out-dir>
  where <package-dir> is the unpacked tarball from `npm pack mnist`.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        count = len(raw) // 784
        samples = [bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
                   for i in range(count)]
        cut = (count * 4) // 5
        train += [(s, digit) for s in samples[:cut]]
        test += [(s, digit) for s in samples[cut:]]
    rng = random.Random(20211206)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, split in (("train", train), ("t10k", test)):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(split), 28, 28),
                  b"".join(s for s, _ in split))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(split),),
                  bytes(y for _, y in split))
        print(f"{name}: {len(split)} samples")


if __name__ == "__main__":
    main()
