"""Write the bundled 5000-digit MNIST subset as gzipped IDX files.

The digits come from the `mnist_5k.csv.gz` table shipped inside the mlxtend
wheel (500 examples per class, raw 0-255 bytes, label in the last column).

    pip download --no-deps mlxtend -d /tmp/mlxtend
    python scripts/make_mnist_subset.py /tmp/mlxtend/mlxtend-*.whl data/mnist
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main(wheel: str, out_dir: str) -> None:
    with zipfile.ZipFile(wheel) as z:
        table = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    rows = [list(map(int, line.split(","))) for line in table.splitlines() if line]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        assert len(row) == 785
        pixels.extend(row[:784])
        labels.append(row[784])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(rows)
    images = struct.pack(">IIII", 2051, n, 28, 28) + bytes(pixels)
    label_bytes = struct.pack(">II", 2049, n) + bytes(labels)
    # mtime=0 keeps the archives byte-stable across regenerations
    with open(out / "mnist5k-images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(images, mtime=0))
    with open(out / "mnist5k-labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(label_bytes, mtime=0))
    print(f"wrote {n} examples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
