"""IDX (MNIST / Fashion-MNIST) parsing, serialization and splitting.

Format (big endian):
    u32 | magic (0x00000803 images, 0x00000801 labels)
    u32 | item count
    u32 | rows, u32 | columns (images only)
    u8[] | payload, row-major
"""

from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path

import numpy as np

from ..exceptions import PepsArgumentError, PepsFormatError
from ..types import Dataset, DatasetKind, FloatArray, IntArray, Split

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
VALIDATION_COUNT = 5000
_GZIP_MAGIC = b"\x1f\x8b"

_FILES = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_u32(data: bytes, offset: int) -> int:
    if len(data) < offset + 4:
        raise PepsFormatError(f"truncated header: need 4 bytes, have {max(len(data) - offset, 0)}", offset)
    value: int = struct.unpack_from(">I", data, offset)[0]
    return value


def _check_magic(data: bytes, expected: int) -> None:
    magic = _read_u32(data, 0)
    if magic != expected:
        raise PepsFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected:08x}", 0)


def parse_idx_images(data: bytes) -> FloatArray:
    """Decode an image file into an (N, rows, cols) array of pixels in [0, 1].

    Raises:
        PepsFormatError: On a wrong magic number or a truncated payload.
    """
    _check_magic(data, IMAGE_MAGIC)
    count, rows, cols = (_read_u32(data, offset) for offset in (4, 8, 12))
    needed = count * rows * cols
    if len(data) - 16 < needed:
        raise PepsFormatError(f"payload holds {len(data) - 16} bytes, header promises {needed}", len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=needed, offset=16)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes, label_count: int = 10) -> IntArray:
    """Decode a label file.

    Raises:
        PepsFormatError: On a wrong magic number, a truncated payload or a
            label outside ``0..label_count-1``.
    """
    _check_magic(data, LABEL_MAGIC)
    count = _read_u32(data, 4)
    if len(data) - 8 < count:
        raise PepsFormatError(f"payload holds {len(data) - 8} labels, header promises {count}", len(data))
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= label_count)
    if bad.size:
        raise PepsFormatError(f"label {labels[bad[0]]} outside 0..{label_count - 1}", 8 + int(bad[0]))
    return labels


def serialize_idx_images(images: FloatArray) -> bytes:
    """Encode (N, rows, cols) pixels in [0, 1] as an image file."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 3:
        raise PepsArgumentError(f"images must have shape (N, rows, cols), got {arr.shape}")
    raw = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IMAGE_MAGIC, *arr.shape) + raw.tobytes()


def serialize_idx_labels(labels: IntArray) -> bytes:
    """Encode integer labels as a label file."""
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    return struct.pack(">II", LABEL_MAGIC, arr.shape[0]) + arr.astype(np.uint8).tobytes()


def read_idx_file(path: Path) -> bytes:
    """Read an IDX file, inflating it first when it is gzip-compressed."""
    data = path.read_bytes()
    if data[:2] == _GZIP_MAGIC:
        data = gzip.decompress(data)
    return data


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, f"{stem}.gz"):
        candidate = directory / name
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def dataset_dir(data_dir: Path, kind: DatasetKind) -> Path:
    """Directory holding the files of ``kind``: ``<data_dir>/<kind>`` or ``data_dir`` itself."""
    nested = data_dir / kind.value
    return nested if nested.is_dir() else data_dir


def load_dataset(data_dir: Path, kind: DatasetKind = DatasetKind.MNIST, split: Split = Split.TRAIN) -> Dataset:
    """Load the official training or test files of a dataset.

    Raises:
        PepsArgumentError: If ``split`` is the validation split (carve it out
            of the training set with ``split_train_val``).
        FileNotFoundError: If the files are missing.
        PepsFormatError: If a file is malformed.
    """
    if split not in _FILES:
        raise PepsArgumentError(f"no IDX files for split {split.value!r}")
    directory = dataset_dir(data_dir, kind)
    image_stem, label_stem = _FILES[split]
    images = parse_idx_images(read_idx_file(_find(directory, image_stem)))
    labels = parse_idx_labels(read_idx_file(_find(directory, label_stem)))
    logger.info(f"Loaded {labels.shape[0]} {kind.value} {split.value} images from {directory}")
    return Dataset(images, labels, split)


def split_train_val(train: Dataset, val_count: int = VALIDATION_COUNT, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded disjoint split; the last ``val_count`` permuted samples form the validation set."""
    if not 0 < val_count < len(train):
        raise PepsArgumentError(f"val_count must lie in 1..{len(train) - 1}, got {val_count}")
    order = np.random.default_rng(seed).permutation(len(train))
    cut = len(train) - val_count
    return train.select(order[:cut], Split.TRAIN), train.select(order[cut:], Split.VAL)


def take_subset(dataset: Dataset, count: int, seed: int = 0, stratify: bool = True) -> Dataset:
    """First ``count`` samples after a seeded shuffle, optionally balanced across classes.

    With ``stratify`` each class gets ``count // classes`` samples (the
    remainder goes to the lowest classes); classes that run short are topped
    up from the rest of the shuffled order.
    """
    if count >= len(dataset):
        return dataset
    if count < 1:
        raise PepsArgumentError(f"subset size must be >= 1, got {count}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    if not stratify:
        return dataset.select(order[:count])

    classes = dataset.label_count
    quota = [count // classes + (1 if c < count % classes else 0) for c in range(classes)]
    chosen = np.zeros(len(order), dtype=bool)
    for position, index in enumerate(order):
        label = int(dataset.labels[index])
        if quota[label] > 0:
            quota[label] -= 1
            chosen[position] = True
    shortfall = count - int(chosen.sum())
    if shortfall:
        chosen[np.flatnonzero(~chosen)[:shortfall]] = True
    return dataset.select(order[chosen])
