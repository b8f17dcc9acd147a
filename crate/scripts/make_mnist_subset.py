#!/usr/bin/env python3
"""Build the stratified MNIST subset shipped in data/mnist-subset/.

Source: the `mnist` npm package (10,000 MNIST digits stored as per-class
JSON arrays of 784 floats in [0, 1]). Fetch it with `npm pack mnist` and
unpack it; pass the unpacked `package/` directory to this script.

Writes gzip-compressed IDX files (the same container MNIST ships in):
  train-images-idx3-ubyte.gz / train-labels-idx1-ubyte.gz   (600 per class)
  t10k-images-idx3-ubyte.gz  / t10k-labels-idx1-ubyte.gz    (100 per class)
"""
import argparse
import gzip
import json
import random
import struct
from pathlib import Path

SIDE = 28


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir", type=Path)
    ap.add_argument("--out", type=Path, default=Path("data/mnist-subset"))
    ap.add_argument("--train-per-class", type=int, default=600)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=20220101)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for digit in range(10):
        raw = json.loads((args.package_dir / "src" / "digits" / f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        samples = [
            [min(255, max(0, round(v * 255))) for v in raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]]
            for i in range(n)
        ]
        rng.shuffle(samples)
        need = args.train_per_class + args.test_per_class
        if n < need:
            raise SystemExit(f"class {digit}: only {n} samples, need {need}")
        train += [(s, digit) for s in samples[: args.train_per_class]]
        test += [(s, digit) for s in samples[args.train_per_class:need]]
    rng.shuffle(train)
    rng.shuffle(test)

    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, items in (("train", train), ("t10k", test)):
        write_images(args.out / f"{prefix}-images-idx3-ubyte.gz", [s for s, _ in items])
        write_labels(args.out / f"{prefix}-labels-idx1-ubyte.gz", [d for _, d in items])
        print(f"{prefix}: {len(items)} images")


if __name__ == "__main__":
    main()
