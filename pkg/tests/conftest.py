import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from batle.config import NetworkConfig
from batle.services.datasets import Domain, DomainDataset, GroundTruth
from batle.services.idx import IMAGES_MAGIC, LABELS_MAGIC


def write_idx(path: Path, array: np.ndarray, magic: int) -> Path:
    """Write ``array`` (uint8) in IDX format, gzip-compressed when the name ends in .gz."""
    array = np.asarray(array, dtype=np.uint8)
    ndim = magic & 0xFF
    header = struct.pack(">I", magic) + struct.pack(f">{ndim}I", *array.shape)
    raw = header + array.tobytes()
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(raw)
    else:
        path.write_bytes(raw)
    return path


def fake_digits(n_per_digit: int = 20, seed: int = 0, size: int = 28):
    """Images whose mean intensity varies within and across digits."""
    g = np.random.default_rng(seed)
    images, labels = [], []
    for digit in range(10):
        for _ in range(n_per_digit):
            level = 20 + 10 * digit + g.integers(0, 60)
            img = np.clip(g.normal(level, 15, size=(size, size)), 0, 255)
            images.append(img.astype(np.uint8))
            labels.append(digit)
    return np.stack(images), np.asarray(labels, dtype=np.uint8)


def write_fake_mnist(directory: Path, n_per_digit: int = 20, split: str = "train") -> Path:
    images, labels = fake_digits(n_per_digit)
    prefix = "train" if split == "train" else "t10k"
    write_idx(directory / f"{prefix}-images-idx3-ubyte", images, IMAGES_MAGIC)
    write_idx(directory / f"{prefix}-labels-idx1-ubyte", labels, LABELS_MAGIC)
    return directory


def linear_dataset(n: int = 500, v: int = 10, tau: float = 1.0, noise: float = 0.5, seed: int = 0) -> DomainDataset:
    """Confounded linear target-domain data with a constant effect ``tau``."""
    g = np.random.default_rng(seed)
    x = g.normal(size=(n, v))
    beta = g.normal(0.0, 0.5, size=v)
    propensity = 1.0 / (1.0 + np.exp(-0.8 * x[:, 0]))
    t = (g.random(n) < propensity).astype(np.float64)
    mu0 = x @ beta
    mu1 = mu0 + tau
    y = np.where(t == 1, mu1, mu0) + g.normal(0.0, noise, size=n)
    return DomainDataset(x, t, y, Domain.TARGET, GroundTruth.from_potentials(mu0, mu1))


@pytest.fixture
def tiny_net() -> NetworkConfig:
    return NetworkConfig(input_dim=4, shared_layer_widths=[6, 5], head_layer_widths=[4], dropout_rate=0.2)


@pytest.fixture
def toy_target() -> DomainDataset:
    return linear_dataset(n=200, v=4, seed=1)


@pytest.fixture
def toy_source() -> DomainDataset:
    g = np.random.default_rng(2)
    return DomainDataset(g.normal(0.3, 1.0, size=(300, 4)), domain=Domain.SOURCE)
