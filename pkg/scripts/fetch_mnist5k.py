"""Build a small MNIST train/val pair in IDX format.

The full MNIST archives are not reachable from package mirrors, but the
mlxtend wheel ships a 5000-image MNIST sample (500 per class) as a gzipped
CSV. This script extracts it and writes a stratified 4500/500 split:

    python scripts/fetch_mnist5k.py --out data/mnist5k

Pass ``--wheel`` to reuse an already downloaded wheel.
"""
from __future__ import annotations

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from ddistill.data import MNIST_MEAN, MNIST_STD, LabeledImageSet, stratified_split, write_idx

WHEEL = "mlxtend==0.24.0"
MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def download_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", WHEEL, "--no-deps", "-d", str(dest), "-q"], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def read_csv(wheel: Path) -> tuple[np.ndarray, np.ndarray]:
    with zipfile.ZipFile(wheel) as zf:
        text = gzip.decompress(zf.read(MEMBER)).decode()
    table = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    return images, table[:, -1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--wheel", default=None)
    ap.add_argument("--val-per-class", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = Path(args.wheel) if args.wheel else download_wheel(Path(tmp))
        images, labels = read_csv(wheel)
    full = LabeledImageSet(images[:, None].astype(np.float32) / 255.0, labels, 10, MNIST_MEAN, MNIST_STD, name="mnist5k")
    train, val = stratified_split(full, args.val_per_class, args.seed)
    for split in (train, val):
        pixels = np.round(split.images[:, 0] * 255.0).astype(np.uint8)
        write_idx(out / f"{split.split}-images-idx3-ubyte", pixels)
        write_idx(out / f"{split.split}-labels-idx1-ubyte", split.labels.astype(np.uint8))
        print(f"{split.split}: {len(split)} images -> {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
