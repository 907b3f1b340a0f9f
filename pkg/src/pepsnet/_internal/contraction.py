"""Logits from an absorbed grid: exact sweep or boundary-MPS approximation.

Absorbed site tensors have axes (N, E, S, W) with extent-1 legs on the
boundary; the center site carries a trailing label axis. A boundary MPS site
has axes (left, open, right), where the open leg faces the next row to absorb.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..exceptions import PepsArgumentError, PepsCapacityError
from ..types import DenseTensor, FloatArray, Logits
from . import ops
from .peps import AbsorbedGrid
from .tape import Tape

logger = logging.getLogger(__name__)

DEFAULT_CHI = 10
EXACT_GUARD = 2**20

# Axis order that turns a row tensor facing down into one facing up.
_FLIP_VERTICAL = (2, 1, 0, 3)


def _log(msg: str) -> None:
    logger.debug(f"[Contraction] {msg}")


@dataclass(frozen=True, slots=True)
class BoundaryMps:
    """Partially contracted rows as a matrix product state.

    Attributes:
        tape: Tape holding the site nodes.
        sites: Node ids of the rank-3 (left, open, right) site tensors.
        max_bond: Truncation bound χ.
        log_scale: Log of the norm factors extracted so far.
        discarded_weights: Per-bond discarded weights of the last truncation sweep.
    """

    tape: Tape
    sites: tuple[int, ...]
    max_bond: int
    log_scale: float = 0.0
    discarded_weights: tuple[float, ...] = field(default=())

    @property
    def length(self) -> int:
        return len(self.sites)

    def tensor(self, k: int) -> DenseTensor:
        return self.tape.tensor(self.sites[k])

    def bonds(self) -> list[int]:
        """Extents of the internal bonds, left to right."""
        return [self.tensor(k).shape[2] for k in range(self.length - 1)]


@dataclass(frozen=True, slots=True)
class ContractionResult:
    """Label vector node plus the scale bookkeeping of one contraction.

    Attributes:
        tape: Tape holding ``node``.
        node: Node id of the T-vector of logit mantissas.
        log_scale: The represented logits are ``values * exp(log_scale)``.
        discarded_weights: Discarded weights of every truncation, in order.
    """

    tape: Tape
    node: int
    log_scale: float
    discarded_weights: tuple[float, ...] = ()

    @property
    def logits(self) -> Logits:
        return Logits(self.tape.tensor(self.node).data, self.log_scale)


def trivial_mps(tape: Tape, length: int, chi: int) -> BoundaryMps:
    """MPS of extent-1 ones, the boundary before any row is absorbed."""
    if chi < 1:
        raise PepsArgumentError(f"chi must be >= 1, got {chi}")
    sites = tuple(tape.constant(DenseTensor(np.ones((1, 1, 1)))) for _ in range(length))
    return BoundaryMps(tape, sites, chi)


def to_dense(mps: BoundaryMps, include_scale: bool = True) -> FloatArray:
    """Contract an MPS into a dense array with axes (left, open_0, ..., open_{L-1}, right)."""
    out = mps.tensor(0).data
    for k in range(1, mps.length):
        out = np.tensordot(out, mps.tensor(k).data, axes=(-1, 0))
    if include_scale:
        out = out * math.exp(mps.log_scale)
    return np.asarray(out)


def canonicalize(mps: BoundaryMps, center_pos: int) -> BoundaryMps:
    """QR sweeps from both ends toward ``center_pos``.

    Sites left of the center become left isometries (``(l·s, r)`` matrices
    with orthonormal columns), sites right of it right isometries (``(l, s·r)``
    matrices with orthonormal rows). The represented vector is unchanged.
    """
    if not 0 <= center_pos < mps.length:
        raise PepsArgumentError(f"center {center_pos} outside an MPS of length {mps.length}")
    tape = mps.tape
    sites = list(mps.sites)

    for k in range(center_pos):
        left, phys, right = tape.tensor(sites[k]).shape
        q, r = ops.qr_reduced(tape, ops.reshape(tape, sites[k], (left * phys, right)))
        bond = tape.tensor(q).shape[1]
        sites[k] = ops.reshape(tape, q, (left, phys, bond))
        sites[k + 1] = ops.contract(tape, r, sites[k + 1], [(1, 0)])

    for k in range(mps.length - 1, center_pos, -1):
        left, phys, right = tape.tensor(sites[k]).shape
        flat = ops.permute(tape, ops.reshape(tape, sites[k], (left, phys * right)), (1, 0))
        q, r = ops.qr_reduced(tape, flat)
        bond = tape.tensor(q).shape[1]
        sites[k] = ops.reshape(tape, ops.permute(tape, q, (1, 0)), (bond, phys, right))
        sites[k - 1] = ops.contract(tape, sites[k - 1], r, [(2, 1)])

    return replace(mps, sites=tuple(sites))


def apply_row(
    mps: BoundaryMps,
    row: list[int] | tuple[int, ...],
    epsilon: float = ops.DEFAULT_SVD_EPSILON,
) -> BoundaryMps:
    """Absorb one row of (N, E, S, W) tensors whose N legs face the MPS.

    The row is contracted in, the result is canonicalized toward the left end,
    then a left-to-right sweep truncates every bond to ``mps.max_bond``. Each
    site is finally divided by its largest magnitude and the logs are added to
    ``log_scale``.
    """
    tape = mps.tape
    if len(row) != mps.length:
        raise PepsArgumentError(f"row has {len(row)} tensors but the MPS has {mps.length} sites")

    sites: list[int] = []
    for k, node in enumerate(row):
        left, _, right = tape.tensor(mps.sites[k]).shape
        _, east, south, west = tape.tensor(node).shape
        merged = ops.contract(tape, mps.sites[k], node, [(1, 0)])  # (l, r, e, s, w)
        merged = ops.permute(tape, merged, (0, 4, 3, 1, 2))
        sites.append(ops.reshape(tape, merged, (left * west, south, right * east)))

    grown = canonicalize(replace(mps, sites=tuple(sites)), 0)
    sites = list(grown.sites)

    discarded: list[float] = []
    for k in range(len(sites) - 1):
        left, phys, right = tape.tensor(sites[k]).shape
        svd = ops.svd_truncated(tape, ops.reshape(tape, sites[k], (left * phys, right)), mps.max_bond, epsilon)
        kept = tape.tensor(svd.s).shape[0]
        sites[k] = ops.reshape(tape, svd.u, (left, phys, kept))
        sites[k + 1] = ops.contract(tape, ops.scale_rows(tape, svd.s, svd.v), sites[k + 1], [(1, 0)])
        discarded.append(svd.discarded_weight)

    log_scale = mps.log_scale
    for k, node in enumerate(sites):
        sites[k], log_factor = ops.max_abs_normalize(tape, node)
        log_scale += log_factor

    return BoundaryMps(tape, tuple(sites), mps.max_bond, log_scale, tuple(discarded))


class _RowSegment:
    """Checkpointable row absorption; remembers the scale and truncation of its last run."""

    def __init__(self, length: int, chi: int, epsilon: float, flip: bool) -> None:
        self.length = length
        self.chi = chi
        self.epsilon = epsilon
        self.flip = flip
        self.log_factor = 0.0
        self.discarded: tuple[float, ...] = ()

    def __call__(self, tape: Tape, *ids: int) -> tuple[int, ...]:
        mps = BoundaryMps(tape, ids[: self.length], self.chi)
        row = [ops.permute(tape, node, _FLIP_VERTICAL) if self.flip else node for node in ids[self.length :]]
        out = apply_row(mps, row, self.epsilon)
        self.log_factor = out.log_scale
        self.discarded = out.discarded_weights
        return out.sites


def _absorb(
    mps: BoundaryMps,
    row: tuple[int, ...],
    flip: bool,
    epsilon: float,
    checkpoint: bool,
) -> BoundaryMps:
    tape = mps.tape
    if not checkpoint:
        oriented = [ops.permute(tape, node, _FLIP_VERTICAL) if flip else node for node in row]
        return apply_row(mps, oriented, epsilon)

    segment = _RowSegment(mps.length, mps.max_bond, epsilon, flip)
    node = tape.checkpoint(segment, *mps.sites, *row)
    sites = tuple(ops.select(tape, node, k) for k in range(mps.length))
    return BoundaryMps(tape, sites, mps.max_bond, mps.log_scale + segment.log_factor, segment.discarded)


def bidirectional_contract(
    grid: AbsorbedGrid,
    chi: int = DEFAULT_CHI,
    epsilon: float = ops.DEFAULT_SVD_EPSILON,
    checkpoint_rows: bool = False,
) -> ContractionResult:
    """Meet-in-the-middle boundary-MPS contraction.

    The top MPS absorbs rows downward and the bottom MPS absorbs rows upward
    until only the center row remains; the three layers are then contracted
    exactly column by column, carrying the label axis to a T-vector.

    Args:
        grid: Absorbed grid with at least two rows.
        chi: Maximum boundary bond dimension.
        epsilon: Regularizer of the SVD backward pass.
        checkpoint_rows: Recompute each row absorption during backward
            instead of keeping its intermediates.

    Raises:
        PepsArgumentError: If the grid has fewer than two rows or ``chi < 1``.
    """
    size = grid.size
    if size < 2:
        raise PepsArgumentError("boundary contraction needs at least two rows; use exact_contract")
    tape = grid.tape
    center_row = grid.center[0]
    discarded: list[float] = []

    top = trivial_mps(tape, size, chi)
    for i in range(center_row):
        top = _absorb(top, grid.nodes[i], False, epsilon, checkpoint_rows)
        discarded.extend(top.discarded_weights)

    bottom = trivial_mps(tape, size, chi)
    for i in range(size - 1, center_row, -1):
        bottom = _absorb(bottom, grid.nodes[i], True, epsilon, checkpoint_rows)
        discarded.extend(bottom.discarded_weights)

    if discarded:
        _log(f"Boundary contraction chi={chi}: max discarded weight {max(discarded):.3e}")

    env = tape.constant(DenseTensor(np.ones((1, 1, 1, 1))))  # (top, center, bottom, label)
    log_scale = top.log_scale + bottom.log_scale
    for j in range(size):
        x = ops.contract(tape, env, top.sites[j], [(0, 0)])
        y = ops.contract(tape, x, grid.node(center_row, j), [(0, 3), (3, 0)])
        z = ops.contract(tape, y, bottom.sites[j], [(0, 0), (4, 1)])
        if (center_row, j) == grid.center:
            z = ops.permute(tape, z, (1, 2, 4, 0, 3))
            right, east, below, _, labels = tape.tensor(z).shape
            z = ops.reshape(tape, z, (right, east, below, labels))
        else:
            z = ops.permute(tape, z, (1, 2, 3, 0))
        env, log_factor = ops.max_abs_normalize(tape, z)
        log_scale += log_factor

    out = ops.reshape(tape, env, (grid.label_count,))
    return ContractionResult(tape, out, log_scale, tuple(discarded))


def exact_contract(grid: AbsorbedGrid) -> ContractionResult:
    """Exact contraction by a site-by-site sweep over the lattice.

    The state keeps one open vertical bond per column, the horizontal bond of
    the sweep front and the label axis, so its size is bounded by ``D^L``.

    Raises:
        PepsCapacityError: If ``D^L`` exceeds 2^20.
    """
    size = grid.size
    bond = grid.max_bond()
    if bond**size > EXACT_GUARD:
        raise PepsCapacityError(f"exact contraction needs D^L = {bond}^{size} > 2^20 entries per label")
    tape = grid.tape

    state = tape.constant(DenseTensor(np.ones((1,) * size + (1, 1))))
    log_scale = 0.0
    for i in range(size):
        for j in range(size):
            merged = ops.contract(tape, state, grid.node(i, j), [(j, 0), (size, 3)])
            order = [*range(j), size + 1, *range(j, size - 1), size, size - 1]
            if (i, j) == grid.center:
                merged = ops.permute(tape, merged, [*order, size + 2])
                shape = tape.tensor(merged).shape
                state = ops.reshape(tape, merged, shape[:-2] + shape[-1:])
            else:
                state = ops.permute(tape, merged, order)
        state, log_factor = ops.max_abs_normalize(tape, state)
        log_scale += log_factor

    out = ops.reshape(tape, state, (grid.label_count,))
    return ContractionResult(tape, out, log_scale)
