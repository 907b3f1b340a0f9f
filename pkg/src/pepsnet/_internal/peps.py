"""The trainable PEPS weight grid and feature absorption."""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from ..exceptions import PepsArgumentError, PepsDimensionError
from ..types import AxisLabel, DenseTensor, FeatureGrid, FloatArray
from . import ops
from .tape import Tape

logger = logging.getLogger(__name__)

INIT_HIGH = 0.01
_LEG_ORDER = (AxisLabel.NORTH, AxisLabel.EAST, AxisLabel.SOUTH, AxisLabel.WEST)

type Site = tuple[int, int]


def site_name(i: int, j: int) -> str:
    """Parameter name of the tensor at row ``i``, column ``j``."""
    return f"site_{i}_{j}"


def _virtual_legs(i: int, j: int, size: int) -> list[AxisLabel]:
    legs: list[AxisLabel] = []
    if i > 0:
        legs.append(AxisLabel.NORTH)
    if j < size - 1:
        legs.append(AxisLabel.EAST)
    if i < size - 1:
        legs.append(AxisLabel.SOUTH)
    if j > 0:
        legs.append(AxisLabel.WEST)
    return legs


def site_labels(i: int, j: int, size: int, center: Site) -> tuple[AxisLabel, ...]:
    """Axis labels of a site: present virtual legs in (N, E, S, W) order, physical, then label at the center."""
    labels = [*_virtual_legs(i, j, size), AxisLabel.PHYSICAL]
    if (i, j) == center:
        labels.append(AxisLabel.LABEL)
    return tuple(labels)


def site_shape(
    i: int, j: int, size: int, bond_dim: int, phys_dim: int, label_count: int, center: Site
) -> tuple[int, ...]:
    """Expected shape of the tensor at ``(i, j)``."""
    extents = {AxisLabel.PHYSICAL: phys_dim, AxisLabel.LABEL: label_count}
    return tuple(extents.get(lab, bond_dim) for lab in site_labels(i, j, size, center))


@dataclass(frozen=True, slots=True, eq=False)
class PepsGrid:
    """L × L lattice of site tensors with one label leg at the center.

    The grid is immutable; optimizer steps build a new grid through
    ``with_parameters``.

    Attributes:
        tensors: Row-major nested tuple of site tensors.
        bond_dim: Virtual bond dimension D.
        phys_dim: Physical dimension d.
        label_count: Number of labels T.
        center: Site carrying the label leg.
        positivity: Whether entries are kept non-negative after each update.
    """

    tensors: tuple[tuple[DenseTensor, ...], ...]
    bond_dim: int
    phys_dim: int
    label_count: int
    center: Site
    positivity: bool = False

    def __post_init__(self) -> None:
        """Audit the leg structure."""
        size = len(self.tensors)
        if size < 1 or any(len(row) != size for row in self.tensors):
            raise PepsDimensionError("PEPS grid must be square and non-empty")
        for i, j in self.sites():
            expected = self.expected_shape(i, j)
            actual = self.tensors[i][j].shape
            if actual != expected:
                raise PepsDimensionError(f"site ({i}, {j}) has shape {actual}, expected {expected}")

    @property
    def size(self) -> int:
        """Lattice side L."""
        return len(self.tensors)

    def sites(self) -> Iterator[Site]:
        """Yield site coordinates in row-major order."""
        for i in range(len(self.tensors)):
            for j in range(len(self.tensors)):
                yield i, j

    def expected_shape(self, i: int, j: int) -> tuple[int, ...]:
        return site_shape(i, j, self.size, self.bond_dim, self.phys_dim, self.label_count, self.center)

    def tensor(self, i: int, j: int) -> DenseTensor:
        return self.tensors[i][j]

    def parameters(self) -> dict[str, FloatArray]:
        """Site arrays keyed by parameter name, in row-major order."""
        return {site_name(i, j): self.tensors[i][j].data for i, j in self.sites()}

    def with_parameters(self, params: Mapping[str, FloatArray]) -> PepsGrid:
        """Return a grid whose sites are replaced by ``params`` (missing names keep their tensor)."""
        rows = []
        for i in range(self.size):
            row = []
            for j in range(self.size):
                old = self.tensors[i][j]
                new = params.get(site_name(i, j))
                row.append(old if new is None else DenseTensor(new, old.axis_labels))
            rows.append(tuple(row))
        return PepsGrid(tuple(rows), self.bond_dim, self.phys_dim, self.label_count, self.center, self.positivity)

    def entry_range(self) -> tuple[float, float]:
        """Smallest and largest entry over all sites."""
        lows = [float(t.data.min()) for row in self.tensors for t in row]
        highs = [float(t.data.max()) for row in self.tensors for t in row]
        return min(lows), max(highs)


def init_grid(
    size: int,
    bond_dim: int,
    phys_dim: int,
    label_count: int,
    seed: int,
    positivity: bool = False,
) -> PepsGrid:
    """Draw every entry i.i.d. from uniform(0, 0.01) with a seeded generator.

    Sites are filled in row-major order, so a seed fully determines the grid.

    Example:
        ```python
        grid = init_grid(3, 2, 2, 10, seed=0)
        grid.tensor(1, 1).shape  # (2, 2, 2, 2, 2, 10)
        ```
    """
    for name, value in (("L", size), ("D", bond_dim), ("d", phys_dim), ("T", label_count)):
        if value < 1:
            raise PepsArgumentError(f"{name} must be >= 1, got {value}")
    center = (size // 2, size // 2)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(size):
        row = []
        for j in range(size):
            shape = site_shape(i, j, size, bond_dim, phys_dim, label_count, center)
            row.append(DenseTensor(rng.uniform(0.0, INIT_HIGH, size=shape), site_labels(i, j, size, center)))
        rows.append(tuple(row))
    logger.debug(f"Initialized {size}x{size} PEPS grid (D={bond_dim}, d={phys_dim}, T={label_count})")
    return PepsGrid(tuple(rows), bond_dim, phys_dim, label_count, center, positivity)


def apply_positivity(grid: PepsGrid) -> PepsGrid:
    """Replace every entry by its absolute value."""
    return grid.with_parameters({name: np.abs(data) for name, data in grid.parameters().items()})


def parameter_count(grid: PepsGrid) -> int:
    """Total number of trainable PEPS entries."""
    return sum(t.size for row in grid.tensors for t in row)


def register_grid(tape: Tape, grid: PepsGrid, trainable: bool = True) -> list[list[int]]:
    """Put every site on ``tape`` as a named leaf (or constant) and return the node ids."""
    nodes: list[list[int]] = []
    for i in range(grid.size):
        row = []
        for j in range(grid.size):
            t = grid.tensors[i][j]
            row.append(tape.leaf(t, site_name(i, j)) if trainable else tape.constant(t))
        nodes.append(row)
    return nodes


@dataclass(frozen=True, slots=True)
class AbsorbedGrid:
    """Site tensors with their physical legs contracted away.

    Every node holds a tensor with axes (N, E, S, W); legs missing at the
    boundary appear as extent-1 axes. The center node has a trailing label
    axis of extent T.

    Attributes:
        tape: Tape holding the nodes.
        nodes: Row-major node ids.
        center: Site carrying the label axis.
        label_count: Number of labels T.
    """

    tape: Tape
    nodes: tuple[tuple[int, ...], ...]
    center: Site
    label_count: int

    @property
    def size(self) -> int:
        """Lattice side L."""
        return len(self.nodes)

    def node(self, i: int, j: int) -> int:
        return self.nodes[i][j]

    def tensor(self, i: int, j: int) -> DenseTensor:
        return self.tape.tensor(self.nodes[i][j])

    def max_bond(self) -> int:
        """Largest virtual extent over all sites."""
        return max(max(self.tensor(i, j).shape[:4]) for i in range(self.size) for j in range(self.size))


def absorb_features(
    tape: Tape,
    grid: PepsGrid,
    site_nodes: list[list[int]],
    features: FeatureGrid | int,
) -> AbsorbedGrid:
    """Contract each site's physical leg with that site's feature vector.

    Args:
        tape: Tape holding ``site_nodes``.
        grid: Grid the nodes were registered from (geometry only).
        site_nodes: Node ids from ``register_grid``.
        features: A fixed feature grid, or the node of an (L, L, d) feature tensor.

    Raises:
        PepsDimensionError: If the lattice side or physical dimension disagree.
    """
    if isinstance(features, FeatureGrid):
        side, dim = features.size, features.dim
    else:
        side, side_b, dim = tape.tensor(features).shape
        if side != side_b:
            raise PepsDimensionError(f"feature grid must be square, got {side}x{side_b}")
    if side != grid.size or dim != grid.phys_dim:
        raise PepsDimensionError(
            f"features are {side}x{side}x{dim} but the grid is {grid.size}x{grid.size}x{grid.phys_dim}"
        )

    rows = []
    for i in range(grid.size):
        row = []
        for j in range(grid.size):
            if isinstance(features, FeatureGrid):
                vector = tape.constant(DenseTensor(features.vectors[i, j]))
            else:
                vector = ops.take(tape, features, (i, j))
            labels = site_labels(i, j, grid.size, grid.center)
            physical = labels.index(AxisLabel.PHYSICAL)
            absorbed = ops.contract(tape, site_nodes[i][j], vector, [(physical, 0)])

            present = set(labels)
            shape = [grid.bond_dim if leg in present else 1 for leg in _LEG_ORDER]
            if (i, j) == grid.center:
                shape.append(grid.label_count)
            row.append(ops.reshape(tape, absorbed, shape))
        rows.append(tuple(row))
    return AbsorbedGrid(tape, tuple(rows), grid.center, grid.label_count)

