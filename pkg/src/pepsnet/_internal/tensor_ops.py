"""Dense tensor kernels every other module builds on.

All kernels are pure functions of immutable ``DenseTensor`` values. Axis labels
are carried along where they stay meaningful but are never validated.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np
import scipy.linalg

from ..exceptions import PepsArgumentError, PepsDimensionError
from ..types import AxisLabel, DenseTensor, FloatArray, SvdResult

logger = logging.getLogger(__name__)

type AxisPairs = Sequence[tuple[int, int]]


def _check_axis(axis: int, rank: int, which: str) -> None:
    if not 0 <= axis < rank:
        raise PepsArgumentError(f"axis {axis} out of range for rank-{rank} tensor {which}")


def contract(a: DenseTensor, b: DenseTensor, axis_pairs: AxisPairs) -> DenseTensor:
    """Sum over paired axes of ``a`` and ``b``.

    Free axes of ``a`` precede free axes of ``b``, each in original order. An
    empty pairing is the outer product.

    Raises:
        PepsArgumentError: If an axis is out of range or paired twice.
        PepsDimensionError: If paired extents differ.
    """
    axes_a = [int(p[0]) for p in axis_pairs]
    axes_b = [int(p[1]) for p in axis_pairs]
    for axis in axes_a:
        _check_axis(axis, a.rank, "a")
    for axis in axes_b:
        _check_axis(axis, b.rank, "b")
    if len(set(axes_a)) != len(axes_a) or len(set(axes_b)) != len(axes_b):
        raise PepsArgumentError(f"axis paired twice in {list(axis_pairs)}")
    for i, j in zip(axes_a, axes_b, strict=True):
        if a.shape[i] != b.shape[j]:
            raise PepsDimensionError(
                f"cannot contract axis {i} (extent {a.shape[i]}) with axis {j} (extent {b.shape[j]})"
            )

    out = np.tensordot(a.data, b.data, axes=(axes_a, axes_b))

    labels: tuple[AxisLabel | None, ...] | None = None
    if a.axis_labels is not None and b.axis_labels is not None:
        labels = tuple(lab for k, lab in enumerate(a.axis_labels) if k not in axes_a) + tuple(
            lab for k, lab in enumerate(b.axis_labels) if k not in axes_b
        )
    return DenseTensor(out, labels)


def permute_axes(t: DenseTensor, order: Sequence[int]) -> DenseTensor:
    """Reorder axes; the data is rewritten in row-major order for the new layout.

    Raises:
        PepsArgumentError: If ``order`` is not a permutation of ``0..rank-1``.
    """
    perm = [int(k) for k in order]
    if sorted(perm) != list(range(t.rank)):
        raise PepsArgumentError(f"{list(order)} is not a permutation of 0..{t.rank - 1}")
    labels = None if t.axis_labels is None else tuple(t.axis_labels[k] for k in perm)
    return DenseTensor(np.ascontiguousarray(np.transpose(t.data, perm)), labels)


def inverse_permutation(order: Sequence[int]) -> list[int]:
    """Return the permutation that undoes ``order``."""
    inverse = [0] * len(order)
    for position, axis in enumerate(order):
        inverse[axis] = position
    return inverse


def reshape(t: DenseTensor, new_shape: Sequence[int]) -> DenseTensor:
    """Change shape metadata; the row-major data order is unchanged.

    Raises:
        PepsDimensionError: If the element counts differ.
    """
    shape = tuple(int(n) for n in new_shape)
    if math.prod(shape) != t.size:
        raise PepsDimensionError(f"cannot reshape {t.shape} ({t.size} entries) into {shape}")
    labels = t.axis_labels if shape == t.shape else None
    return DenseTensor(t.data.reshape(shape), labels)


def _require_matrix(m: DenseTensor, op: str) -> None:
    if m.rank != 2:
        raise PepsArgumentError(f"{op} needs a rank-2 tensor, got rank {m.rank}")


def qr_arrays(m: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Reduced QR of a matrix with a non-negative diagonal on ``r``."""
    q, r = np.linalg.qr(m, mode="reduced")
    signs = np.sign(np.diagonal(r)).copy()
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


def qr_reduced(m: DenseTensor) -> tuple[DenseTensor, DenseTensor]:
    """Reduced QR decomposition ``m = q · r``.

    ``q`` has min(rows, cols) orthonormal columns and ``r`` is upper triangular
    with a non-negative diagonal.

    Raises:
        PepsArgumentError: If ``m`` is not rank 2.
    """
    _require_matrix(m, "qr_reduced")
    q, r = qr_arrays(m.data)
    return DenseTensor(q), DenseTensor(r)


def svd_arrays(m: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Full reduced SVD ``m = u · diag(s) · vh`` with s non-increasing.

    Falls back to the slower but more robust ``gesvd`` LAPACK driver when the
    default divide-and-conquer routine fails to converge.
    """
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        logger.warning("numpy svd did not converge on a %s matrix; retrying with gesvd", m.shape)
        u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
    return u, s, vh


def truncation_rank(spectrum_length: int, chi: int) -> int:
    """Number of singular values kept for bond limit ``chi``."""
    return min(chi, spectrum_length)


def svd_truncated(m: DenseTensor, chi: int) -> SvdResult:
    """Keep the ``chi`` largest singular values of ``m``.

    ``u · diag(s) · v`` is the best rank-k Frobenius approximation with
    k = min(chi, min(rows, cols)). Ties at the boundary keep the first values in
    the order LAPACK returns.

    Raises:
        PepsArgumentError: If ``m`` is not rank 2 or ``chi < 1``.
    """
    _require_matrix(m, "svd_truncated")
    if chi < 1:
        raise PepsArgumentError(f"chi must be >= 1, got {chi}")
    u, s, vh = svd_arrays(m.data)
    k = truncation_rank(s.shape[0], chi)
    discarded = float(np.sqrt(np.sum(s[k:] ** 2)))
    return SvdResult(
        u=DenseTensor(u[:, :k]),
        s=DenseTensor(s[:k]),
        v=DenseTensor(vh[:k, :]),
        discarded_weight=discarded,
    )
