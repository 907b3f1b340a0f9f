"""Shared fixtures: seeded generators, tiny datasets, IDX data directories and gradient checks."""

from __future__ import annotations

import gzip
import string
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from pepsnet._internal.idx import serialize_idx_images, serialize_idx_labels
from pepsnet._internal.peps import AbsorbedGrid, PepsGrid, absorb_features, register_grid, site_labels, site_shape
from pepsnet._internal.tape import Tape
from pepsnet.types import DenseTensor, FeatureGrid, FloatArray

FD_STEP = 1e-6
FD_RTOL = 1e-5
FD_FLOOR = 1e-8
# Absolute slack for central differences of O(1) losses (roundoff ~ 1e-16 / h).
FD_ATOL = 1e-9


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def finite_difference(fn: Callable[[FloatArray], float], x: FloatArray, h: float = FD_STEP) -> FloatArray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        up = fn(x)
        flat[k] = saved - h
        down = fn(x)
        flat[k] = saved
        out[k] = (up - down) / (2 * h)
    return grad


def assert_gradients_close(analytic: FloatArray, numeric: FloatArray, rtol: float = FD_RTOL) -> None:
    """Relative error ``|a - n| / max(|a|, |n|, 1e-8)`` within ``rtol`` (plus roundoff slack)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    assert a.shape == n.shape
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), FD_FLOOR)
    err = np.abs(a - n)
    ok = err <= rtol * scale + FD_ATOL
    worst = int(np.argmax(err / scale))
    assert ok.all(), f"gradient mismatch at flat index {worst}: analytic {a.flat[worst]}, numeric {n.flat[worst]}"


def random_grid(
    rng: np.random.Generator,
    size: int,
    bond_dim: int,
    phys_dim: int,
    label_count: int,
    low: float = 0.0,
    high: float = 1.0,
) -> PepsGrid:
    """PEPS grid with uniform(low, high) entries."""
    center = (size // 2, size // 2)
    rows = []
    for i in range(size):
        row = []
        for j in range(size):
            shape = site_shape(i, j, size, bond_dim, phys_dim, label_count, center)
            row.append(DenseTensor(rng.uniform(low, high, size=shape), site_labels(i, j, size, center)))
        rows.append(tuple(row))
    return PepsGrid(tuple(rows), bond_dim, phys_dim, label_count, center)


def random_features(rng: np.random.Generator, size: int, phys_dim: int) -> FeatureGrid:
    return FeatureGrid(rng.uniform(0.0, 1.0, size=(size, size, phys_dim)))


def absorbed(grid: PepsGrid, features: FeatureGrid, tape: Tape | None = None) -> AbsorbedGrid:
    """Absorb ``features`` into ``grid`` on a (new) tape with the sites as leaves."""
    tape = tape if tape is not None else Tape()
    nodes = register_grid(tape, grid)
    return absorb_features(tape, grid, nodes, features)


def dense_oracle(grid: PepsGrid, features: FeatureGrid) -> FloatArray:
    """Logits by a single einsum over the whole lattice."""
    letters = iter(string.ascii_letters)
    size = grid.size
    horizontal = {(i, j): next(letters) for i in range(size) for j in range(size - 1)}
    vertical = {(i, j): next(letters) for i in range(size - 1) for j in range(size)}
    label = next(letters)
    operands: list[FloatArray] = []
    subscripts: list[str] = []
    for i in range(size):
        for j in range(size):
            legs = []
            if i > 0:
                legs.append(vertical[(i - 1, j)])
            if j < size - 1:
                legs.append(horizontal[(i, j)])
            if i < size - 1:
                legs.append(vertical[(i, j)])
            if j > 0:
                legs.append(horizontal[(i, j - 1)])
            phys = next(letters)
            legs.append(phys)
            if (i, j) == grid.center:
                legs.append(label)
            operands.append(grid.tensor(i, j).data)
            subscripts.append("".join(legs))
            operands.append(features.vectors[i, j])
            subscripts.append(phys)
    return np.asarray(np.einsum(",".join(subscripts) + "->" + label, *operands, optimize=True))


def toy_images(count: int, side: int, rng: np.random.Generator) -> tuple[FloatArray, np.ndarray]:
    """Dark images for label 0 and bright images for label 1."""
    labels = np.arange(count) % 2
    base = np.where(labels[:, None, None] == 1, 0.9, 0.1)
    noise = rng.uniform(-0.05, 0.05, size=(count, side, side))
    return np.clip(base + noise, 0.0, 1.0), labels


def write_idx_dir(
    directory: Path,
    train_count: int = 40,
    test_count: int = 12,
    side: int = 4,
    seed: int = 0,
    compress: bool = False,
) -> Path:
    """Write a fake MNIST-layout dataset of ``side``-pixel images."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, count in (("train", train_count), ("t10k", test_count)):
        images, labels = toy_images(count, side, rng)
        labels = labels + 2 * (np.arange(count) % 5 == 4)
        for stem, payload in (
            (f"{prefix}-images-idx3-ubyte", serialize_idx_images(images)),
            (f"{prefix}-labels-idx1-ubyte", serialize_idx_labels(labels)),
        ):
            if compress:
                (directory / f"{stem}.gz").write_bytes(gzip.compress(payload))
            else:
                (directory / stem).write_bytes(payload)
    return directory


@pytest.fixture
def data_dir(tmp_path: Path) -> Path:
    return write_idx_dir(tmp_path / "data")
