#!/usr/bin/env python3
"""Rebuild the files under data/ from upstream package archives.

Boston housing: `pip download pydataset==0.2.0 --no-deps`, unpack the sdist and
its inner resources.tar.gz, then point --boston at rdata/csv/MASS/Boston.csv.

MNIST subset: `npm pack mnist@1.1.0`, unpack, and point --mnist-digits at
package/src/digits. That package carries 10,000 MNIST digits stored as
x/255 rounded to three decimals; rounding back to bytes is exact.
"""
import argparse
import csv
import json
import random
import struct
from pathlib import Path


def write_boston(src: Path, dst: Path) -> None:
    with src.open() as f:
        rows = list(csv.reader(f))
    header = rows[0][1:]
    with dst.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows[1:]:
            w.writerow(r[1:])


def write_mnist(digits: Path, out: Path, seed: int) -> None:
    images = []
    for label in range(10):
        data = json.loads((digits / f"{label}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            px = bytes(round(v * 255) for v in data[i * 784:(i + 1) * 784])
            images.append((px, label))
    random.Random(seed).shuffle(images)
    n = len(images)
    with (out / "mnist10k-images-idx3-ubyte").open("wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for px, _ in images:
            f.write(px)
    with (out / "mnist10k-labels-idx1-ubyte").open("wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(lbl for _, lbl in images))


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--boston", type=Path, required=True)
    p.add_argument("--mnist-digits", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    p.add_argument("--seed", type=int, default=20150623)
    a = p.parse_args()
    (a.out / "mnist").mkdir(parents=True, exist_ok=True)
    write_boston(a.boston, a.out / "boston.csv")
    write_mnist(a.mnist_digits, a.out / "mnist", a.seed)


if __name__ == "__main__":
    main()
