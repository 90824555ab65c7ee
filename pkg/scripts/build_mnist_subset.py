"""Write a 5,000-image MNIST subset as gzipped IDX files.

The images come from ``mnist_5k.csv.gz`` bundled with mlxtend (500 per class,
taken from the original MNIST distribution). Either have mlxtend installed or
point ``--wheel`` at a downloaded mlxtend wheel:

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/build_mnist_subset.py --wheel /tmp/mlx/mlxtend-*.whl
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from seq2d.mnist import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv(wheel=None) -> np.ndarray:
    if wheel:
        with zipfile.ZipFile(wheel) as zf:
            raw = zf.read(MEMBER)
    else:
        import mlxtend

        raw = (Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--wheel", help="path to an mlxtend wheel")
    parser.add_argument("--out", default="data/mnist", help="output directory")
    args = parser.parse_args()

    table = read_csv(args.wheel)
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist5k-images-idx3-ubyte.gz", pixels)
    write_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main()
