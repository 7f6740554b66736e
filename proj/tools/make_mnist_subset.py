#!/usr/bin/env python3
"""Write a 5000-sample MNIST subset as IDX files.

The samples come from the copy bundled with mlxtend (mlxtend/data/data/mnist_5k.csv.gz).
Pass either an installed mlxtend or the path to an mlxtend wheel.
The subset is shuffled with a fixed seed and split 4000/1000 with equal class counts.
"""
import argparse
import gzip
import pathlib
import random
import struct
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv(wheel):
    if wheel:
        with zipfile.ZipFile(wheel) as z:
            raw = z.read(MEMBER)
    else:
        import mlxtend
        raw = (pathlib.Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    rows = []
    for line in gzip.decompress(raw).decode().splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        rows.append((vals[:-1], vals[-1]))
    return rows


def write_idx(out, stem, rows):
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(rows), 28, 28))
        for px, _ in rows:
            f.write(bytes(px))
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(rows)))
        f.write(bytes(lbl for _, lbl in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", help="path to an mlxtend wheel")
    ap.add_argument("--out", default="data/mnist5k")
    args = ap.parse_args()
    rows = read_csv(args.wheel)
    by_class = {}
    for r in rows:
        by_class.setdefault(r[1], []).append(r)
    rng = random.Random(20200823)
    train, test = [], []
    for c in sorted(by_class):
        group = by_class[c]
        rng.shuffle(group)
        test += group[:100]
        train += group[100:]
    rng.shuffle(train)
    rng.shuffle(test)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
