#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package to IDX files.

Usage: mnist_json_to_idx.py <package>/src/digits <out dir> [train count]

Each digit file holds a flat list of 28x28 images with pixels in [0, 1]
rounded to three decimals; they are mapped back to bytes with round(255 v).
The first train_count/10 images of every digit go to the train split, the
rest to the test split, and both splits are shuffled with a fixed seed.
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(prefix, items):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(items), 28, 28))
        for pixels, _ in items:
            f.write(bytes(pixels))
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(items)))
        f.write(bytes(label for _, label in items))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    train_count = int(sys.argv[3]) if len(sys.argv) > 3 else 6000
    per_class = train_count // 10
    train, test = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        images = [flat[i:i + 784] for i in range(0, len(flat), 784)]
        for k, img in enumerate(images):
            item = ([min(255, max(0, round(v * 255))) for v in img], digit)
            (train if k < per_class else test).append(item)
    rng = random.Random(20170101)
    rng.shuffle(train)
    rng.shuffle(test)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train", train)
    write_idx(out / "t10k", test)
    print(f"train {len(train)} test {len(test)}")


if __name__ == "__main__":
    main()
