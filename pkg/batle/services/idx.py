"""
Reader for the MNIST IDX binary format.

    [offset] [type]          [value]
    0000     32 bit integer  0x00000803 (images) / 0x00000801 (labels)
    0004     32 bit integer  number of items
    0008     32 bit integer  number of rows      (images only)
    0012     32 bit integer  number of columns   (images only)
    ....     unsigned byte   pixels / labels

All integers are big-endian. Files ending in ``.gz`` are decompressed first.
"""
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from batle.errors import DataFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class ImageSet:
    images: np.ndarray  # n x rows x cols, uint8
    labels: np.ndarray  # n, uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: expected magic 0x{expected_magic:08x}, found 0x{magic:08x}")

    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise DataFormatError(f"{path}: truncated header, need {header_size} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_size])
    expected = int(np.prod(dims))
    payload = len(raw) - header_size
    if payload < expected:
        raise DataFormatError(f"{path}: truncated payload, header declares {expected} bytes, found {payload}")
    if expected == 0:
        return np.zeros(dims, dtype=np.uint8)
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_size).reshape(dims).copy()


def load_idx_images(path: Union[str, Path]) -> np.ndarray:
    return _read_idx(path, IMAGES_MAGIC)


def load_idx_labels(path: Union[str, Path]) -> np.ndarray:
    return _read_idx(path, LABELS_MAGIC)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> ImageSet:
    """Read an image file and its label file into an ``ImageSet``."""
    return ImageSet(images=load_idx_images(images_path), labels=load_idx_labels(labels_path))


def _locate(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory: Union[str, Path], split: str = "train") -> ImageSet:
    """Load the standard MNIST files of ``split`` ("train" or "test") from ``directory``."""
    if split not in SPLIT_FILES:
        raise DataFormatError(f"unknown MNIST split {split!r}, expected one of {sorted(SPLIT_FILES)}")
    directory = Path(directory)
    images_stem, labels_stem = SPLIT_FILES[split]
    return load_idx(_locate(directory, images_stem), _locate(directory, labels_stem))
