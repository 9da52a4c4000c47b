"""Builds data/mnist-desk/ from the 10000-digit MNIST sample in the npm ``mnist`` package.

The sandbox has no route to the canonical MNIST mirrors, but the ``mnist``
npm package (MIT licence) bundles 10000 real MNIST digits as JSON pixel
arrays rounded to three decimals, which is fine enough to recover the
original bytes exactly. This script draws a stratified 1000-digit test set,
then a stratified 5000-digit train set from the rest, and writes gzipped IDX.

    npm pack mnist@1.1.0            # -> mnist-1.1.0.tgz
    python scripts/build_desk_mnist.py mnist-1.1.0.tgz
"""

import argparse
import json
import tarfile
from pathlib import Path

import numpy as np

from defdistill.data import RawDataset, stratified_indices, write_mnist_idx


def read_digits(tarball: Path) -> RawDataset:
    images, labels = [], []
    with tarfile.open(tarball) as tar:
        for digit in range(10):
            doc = json.load(tar.extractfile(f"package/src/digits/{digit}.json"))
            values = np.asarray(doc["data"], dtype=np.float64).reshape(-1, 28, 28)
            raw = np.rint(values * 255.0)
            if not np.array_equal(np.round(raw / 255.0, 3), values):
                raise ValueError(f"digit {digit}: pixels do not map back to bytes")
            images.append(raw.astype(np.uint8))
            labels.append(np.full(len(raw), digit, dtype=np.int64))
    pixels = np.concatenate(images)[:, None].astype(np.float32) / np.float32(255.0)
    return RawDataset(pixels, np.concatenate(labels), "train")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("tarball", type=Path)
    parser.add_argument("--out", type=Path, default=Path("data/mnist-desk"))
    parser.add_argument("--train-count", type=int, default=5000)
    parser.add_argument("--test-count", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    full = read_digits(args.tarball)
    test_idx = stratified_indices(full.labels, args.test_count, args.seed)
    rest = np.setdiff1d(np.arange(len(full)), test_idx)
    train_idx = rest[stratified_indices(full.labels[rest], args.train_count, args.seed + 1)]
    train, test = full.take(train_idx), full.take(test_idx)

    args.out.mkdir(parents=True, exist_ok=True)
    write_mnist_idx(train, args.out / "train-images-idx3-ubyte.gz",
                    args.out / "train-labels-idx1-ubyte.gz", compress=True)
    write_mnist_idx(test, args.out / "t10k-images-idx3-ubyte.gz",
                    args.out / "t10k-labels-idx1-ubyte.gz", compress=True)
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")


if __name__ == "__main__":
    main()
