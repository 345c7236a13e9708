"""MNIST IDX loading and 29x29 preparation.

IDX files start with a big-endian header (magic, count, then rows and columns
for images) followed by raw unsigned bytes. Files may be gzip-compressed; the
loader detects that from the gzip signature, not the file name.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .nn import Sample

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SOURCE_SIDE = 28
SIDE = 29
NUM_CLASSES = 10

CANONICAL_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataError(Exception):
    """Base class for every dataset problem."""


class MagicMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class PairingError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class MissingDataError(DataError):
    pass


PathLike = Union[str, Path]


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingDataError(f"{path}: no such file") from None
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _header(raw: bytes, path, magic: int, ndims: int):
    size = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX magic")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise MagicMismatchError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < size:
        raise TruncatedFileError(f"{path}: header truncated")
    return struct.unpack(">" + "I" * ndims, raw[4:size]), size


def load_idx_images(path: PathLike) -> np.ndarray:
    """Raw 28x28 images as a ``(n, 28, 28)`` uint8 array."""
    raw = _read_bytes(path)
    (count, rows, cols), offset = _header(raw, path, IMAGE_MAGIC, 3)
    if (rows, cols) != (SOURCE_SIDE, SOURCE_SIDE):
        raise DimensionMismatchError(f"{path}: images are {rows}x{cols}, expected 28x28")
    need = offset + count * rows * cols
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes for {count} images, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=offset).reshape(count, rows, cols)


def load_idx_labels(path: PathLike, expected_count: Optional[int] = None) -> np.ndarray:
    """Labels as a uint8 vector; ``expected_count`` checks pairing with an image file."""
    raw = _read_bytes(path)
    (count,), offset = _header(raw, path, LABEL_MAGIC, 1)
    if len(raw) < offset + count:
        raise TruncatedFileError(f"{path}: expected {count} labels, found {len(raw) - offset}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)
    if expected_count is not None and count != expected_count:
        raise PairingError(f"{path}: {count} labels for {expected_count} images")
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise LabelRangeError(f"{path}: label {labels[bad[0]]} at position {bad[0]} is outside 0-9")
    return labels


def pad_and_scale(images: np.ndarray, symmetric: bool = False, dtype=np.float32) -> np.ndarray:
    """Bytes to [0, 1] (or [-1, 1]), zero-padded at the bottom and right to 29x29.

    Returns a contiguous ``(n, 841)`` array. With ``symmetric`` the background
    maps to -1 so that padding still matches the background value.
    """
    images = np.asarray(images)
    n = images.shape[0]
    out = np.zeros((n, SIDE, SIDE), dtype=dtype)
    out[:, :SOURCE_SIDE, :SOURCE_SIDE] = images / 255.0
    if symmetric:
        out = out * 2 - 1
    return np.ascontiguousarray(out.reshape(n, SIDE * SIDE))


@dataclass(frozen=True)
class SampleSet:
    """Images stored contiguously as ``(n, 841)`` plus their labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != SIDE * SIDE:
            raise DimensionMismatchError(f"expected (n, 841) images, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise PairingError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, k: int) -> Sample:
        return Sample(self.images[k].reshape(SIDE, SIDE), int(self.labels[k]))

    def head(self, n: int) -> "SampleSet":
        return SampleSet(self.images[:n], self.labels[:n])

    def astype(self, dtype) -> "SampleSet":
        if self.images.dtype == np.dtype(dtype):
            return self
        return SampleSet(np.ascontiguousarray(self.images, dtype=dtype), self.labels)


@dataclass(frozen=True)
class DataSets:
    """Train, validation and test sets; validation is the training set unless a split is given."""

    train: SampleSet
    validation: SampleSet
    test: SampleSet

    def astype(self, dtype) -> "DataSets":
        train = self.train.astype(dtype)
        validation = train if self.validation is self.train else self.validation.astype(dtype)
        return DataSets(train=train, validation=validation, test=self.test.astype(dtype))


def prepare(images: np.ndarray, labels: np.ndarray, test_images: np.ndarray, test_labels: np.ndarray,
            limit: Optional[int] = None, *, symmetric: bool = False, validation_split: int = 0,
            dtype=np.float32) -> DataSets:
    """Scale and pad raw images into :class:`DataSets`.

    ``limit`` keeps the first ``limit`` training images and shrinks the test
    set by the same fraction (rounded up). ``validation_split`` > 0 holds out
    that many trailing training images as a separate validation set; by
    default validation aliases the training set.
    """
    if len(images) != len(labels) or len(test_images) != len(test_labels):
        raise PairingError("image and label counts differ")
    n_train, n_test = len(images), len(test_images)
    if limit is not None:
        if limit < 1:
            raise ValueError(f"limit must be positive, got {limit}")
        keep_test = min(n_test, math.ceil(limit * n_test / n_train)) if n_train else n_test
        n_train = min(n_train, limit)
        n_test = keep_test
    train = SampleSet(pad_and_scale(images[:n_train], symmetric, dtype), np.array(labels[:n_train], dtype=np.int64))
    test = SampleSet(pad_and_scale(test_images[:n_test], symmetric, dtype), np.array(test_labels[:n_test], dtype=np.int64))
    if validation_split:
        if not 0 < validation_split < len(train):
            raise ValueError("validation_split must leave at least one training image")
        cut = len(train) - validation_split
        validation = SampleSet(train.images[cut:], train.labels[cut:])
        train = SampleSet(train.images[:cut], train.labels[:cut])
    else:
        validation = train
    return DataSets(train=train, validation=validation, test=test)


def find_files(directory: PathLike) -> dict:
    """Locate the four canonical files (plain or ``.gz``) inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingDataError(f"{directory}: not a directory")
    found, missing = {}, []
    for key, name in CANONICAL_FILES.items():
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.is_file():
                found[key] = candidate
                break
        else:
            missing.append(name)
    if missing:
        raise MissingDataError(f"{directory}: missing {', '.join(missing)} (plain or .gz)")
    return found


def load_mnist(directory: PathLike, limit: Optional[int] = None, **kwargs) -> DataSets:
    files = find_files(directory)
    images = load_idx_images(files["train_images"])
    labels = load_idx_labels(files["train_labels"], expected_count=len(images))
    test_images = load_idx_images(files["test_images"])
    test_labels = load_idx_labels(files["test_labels"], expected_count=len(test_images))
    return prepare(images, labels, test_images, test_labels, limit, **kwargs)
