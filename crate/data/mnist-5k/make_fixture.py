"""Rebuild the IDX fixture from the 5,000-sample MNIST subset shipped in mlxtend.

Usage: python3 make_fixture.py path/to/mlxtend-*.whl
"""
import gzip
import random
import struct
import sys
import zipfile

wheel = zipfile.ZipFile(sys.argv[1])
rows = gzip.decompress(wheel.read("mlxtend/data/data/mnist_5k.csv.gz")).decode().splitlines()
samples = [list(map(int, r.split(","))) for r in rows]

by_class = {}
for s in samples:
    by_class.setdefault(s[-1], []).append(s)

rng = random.Random(20221010)
train, test = [], []
for label in sorted(by_class):
    group = by_class[label]
    rng.shuffle(group)
    train += group[:400]
    test += group[400:]
rng.shuffle(train)
rng.shuffle(test)


def write(prefix, split):
    with gzip.GzipFile(f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(split), 28, 28))
        f.write(bytes(v for s in split for v in s[:-1]))
    with gzip.GzipFile(f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(split)))
        f.write(bytes(s[-1] for s in split))


write("train", train)
write("t10k", test)
