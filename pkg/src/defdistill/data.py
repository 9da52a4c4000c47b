"""MNIST IDX and CIFAR10 binary loaders, and deterministic stratified subsets."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class RawDataset:
    images: np.ndarray  # float32, count x channels x height x width, in [0, 1]
    labels: np.ndarray  # int64 class indices
    split: str = "train"
    checksum: str = ""
    class_count: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetFormatError(f"label outside 0..{self.class_count - 1}")

    def __len__(self):
        return int(self.labels.shape[0])

    def take(self, indices) -> "RawDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return RawDataset(self.images[idx], self.labels[idx], self.split, self.checksum,
                          self.class_count)


def _read_bytes(path) -> bytes:
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(blob: bytes, magic: int, ndims: int, what: str) -> np.ndarray:
    header_len = 4 + 4 * ndims
    if len(blob) >= 4:
        found = struct.unpack_from(">I", blob, 0)[0]
        if found != magic:
            raise BadMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header_len:
        raise TruncatedFileError(f"{what}: file shorter than its {header_len}-byte header")
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) - header_len < size:
        raise TruncatedFileError(
            f"{what}: expected {size} data bytes, found {len(blob) - header_len}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header_len).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> RawDataset:
    """Reads an IDX image/label pair (optionally gzipped); pixels become x/255."""
    img_blob = _read_bytes(images_path)
    lbl_blob = _read_bytes(labels_path)
    images = _parse_idx(img_blob, IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(lbl_blob, LABELS_MAGIC, 1, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels")
    digest = hashlib.sha256(img_blob + lbl_blob).hexdigest()
    name = Path(images_path).name
    split = "test" if name.startswith(("t10k", "test")) else "train"
    pixels = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return RawDataset(pixels, labels.astype(np.int64), split, digest)


def idx_bytes(array: np.ndarray) -> bytes:
    """Encodes a uint8 array as IDX (images when 3-D, labels when 1-D)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}[array.ndim]
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_mnist_idx(dataset: RawDataset, images_path, labels_path, compress: bool = False):
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    for path, arr in ((images_path, pixels), (labels_path, dataset.labels.astype(np.uint8))):
        blob = idx_bytes(arr)
        if compress:
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


def load_cifar10_binary(path) -> RawDataset:
    """Standard CIFAR10 binary batch: label byte then R, G, B 32x32 planes."""
    blob = _read_bytes(path)
    if len(blob) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    split = "test" if "test" in Path(path).name else "train"
    return RawDataset(images, labels, split, hashlib.sha256(blob).hexdigest())


def cifar10_bytes(dataset: RawDataset) -> bytes:
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    labels = dataset.labels.astype(np.uint8)[:, None]
    return np.concatenate([labels, pixels], axis=1).tobytes()


def stratified_indices(labels: np.ndarray, count: int, seed: int,
                       class_count: int = 10) -> np.ndarray:
    """Seeded per-class quotas, as equal as the class sizes allow.

    Returns sorted indices into ``labels``.
    """
    labels = np.asarray(labels)
    if count > labels.size:
        raise ValueError(f"subset of {count} requested from {labels.size} samples")
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(class_count)]
    sizes = np.array([len(p) for p in pools])
    # highest common level every class can be filled to, then one extra each
    # for the lowest-numbered classes that still have room
    level = 0
    while level < sizes.max() and np.minimum(sizes, level + 1).sum() <= count:
        level += 1
    quotas = np.minimum(sizes, level)
    spare = count - int(quotas.sum())
    for c in np.flatnonzero(sizes > level)[:spare]:
        quotas[c] += 1
    picked = np.concatenate([pools[c][:quotas[c]] for c in range(class_count)])
    return np.sort(picked)


def subset(dataset: RawDataset, count: int, seed: int) -> RawDataset:
    return dataset.take(stratified_indices(dataset.labels, count, seed, dataset.class_count))


def stratified_split(dataset: RawDataset, test_count: int, seed: int):
    """Disjoint (train, test) pair with a stratified test part."""
    test_idx = stratified_indices(dataset.labels, test_count, seed, dataset.class_count)
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[test_idx] = False
    train = dataset.take(np.flatnonzero(train_mask))
    test = dataset.take(test_idx)
    return (RawDataset(train.images, train.labels, "train", dataset.checksum),
            RawDataset(test.images, test.labels, "test", dataset.checksum))
