#!/usr/bin/env python3
"""Writes the 10,000 MNIST digits shipped in the npm `mnist` package as IDX files.

Usage: mnist_subset.py OUT_DIR [PACKAGE_DIR]

Without PACKAGE_DIR the package tarball is fetched with `npm pack mnist`.
The digits are shuffled with a fixed seed so any prefix is class-balanced.
"""
import json
import pathlib
import random
import struct
import subprocess
import sys
import tarfile
import tempfile


def load_digits(pkg: pathlib.Path):
    examples = []
    for label in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{label}.json").read_text())["data"]
        for start in range(0, len(data), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in data[start:start + 784])
            examples.append((pixels, label))
    return examples


def main():
    out = pathlib.Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        if len(sys.argv) > 2:
            pkg = pathlib.Path(sys.argv[2])
        else:
            subprocess.run(["npm", "pack", "mnist", "--pack-destination", tmp], check=True, capture_output=True)
            tarball = next(pathlib.Path(tmp).glob("mnist-*.tgz"))
            with tarfile.open(tarball) as tf:
                tf.extractall(tmp)
            pkg = pathlib.Path(tmp) / "package"
        examples = load_digits(pkg)
    random.Random(0).shuffle(examples)
    n = len(examples)
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for pixels, _ in examples:
            f.write(pixels)
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(label for _, label in examples))
    print(f"wrote {n} examples to {out}")


if __name__ == "__main__":
    main()
