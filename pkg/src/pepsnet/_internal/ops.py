"""Differentiable primitives and the helpers that record them on a tape.

The primitive set is closed over everything the classifier needs: contraction,
axis plumbing, elementwise arithmetic, the two feature-map nonlinearities, the
two matrix factorizations, and the fused softmax cross-entropy loss.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from typing import Any, NamedTuple

import numpy as np
import scipy.linalg

from ..exceptions import PepsArgumentError, PepsDimensionError
from ..types import DenseTensor, FloatArray
from .tape import Grad, Primitive, Tape, Value
from .tensor_ops import (
    AxisPairs,
    contract as contract_tensors,
    inverse_permutation,
    permute_axes as permute_tensor,
    qr_arrays,
    reshape as reshape_tensor,
    svd_arrays,
    truncation_rank,
)

logger = logging.getLogger(__name__)

DEFAULT_SVD_EPSILON = 1e-12
RANK_DEFICIENCY_TOL = 1e-12
_MAX_LOG_FLOAT = 709.0


def _single(value: Value) -> DenseTensor:
    if isinstance(value, tuple):
        raise PepsArgumentError("expected a single-output value")
    return value


def _dense(grad: Grad | None) -> FloatArray:
    assert grad is not None and not isinstance(grad, tuple)
    return grad


# =============================================================================
# Linear plumbing
# =============================================================================


class Contract(Primitive):
    name = "contract"

    def __init__(self, axis_pairs: AxisPairs) -> None:
        self.axis_pairs = [(int(i), int(j)) for i, j in axis_pairs]

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        a, b = (_single(v) for v in inputs)
        return contract_tensors(a, b, self.axis_pairs), (a.data, b.data)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        a, b = saved
        g = _dense(grad)
        axes_a = [i for i, _ in self.axis_pairs]
        axes_b = [j for _, j in self.axis_pairs]
        free_a = [k for k in range(a.ndim) if k not in axes_a]
        free_b = [k for k in range(b.ndim) if k not in axes_b]
        b_to_a = {j: i for i, j in self.axis_pairs}
        a_to_b = {i: j for i, j in self.axis_pairs}
        g_free_b = list(range(len(free_a), len(free_a) + len(free_b)))

        grad_a = np.tensordot(g, b, axes=(g_free_b, free_b))
        layout_a = free_a + [b_to_a[j] for j in sorted(axes_b)]
        grad_a = np.transpose(grad_a, np.argsort(layout_a))

        grad_b = np.tensordot(a, g, axes=(free_a, list(range(len(free_a)))))
        layout_b = [a_to_b[i] for i in sorted(axes_a)] + free_b
        grad_b = np.transpose(grad_b, np.argsort(layout_b))
        return grad_a, grad_b


class Permute(Primitive):
    name = "permute"

    def __init__(self, order: Sequence[int]) -> None:
        self.order = [int(k) for k in order]

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        return permute_tensor(_single(inputs[0]), self.order), None

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        return (np.transpose(_dense(grad), inverse_permutation(self.order)),)


class Reshape(Primitive):
    name = "reshape"

    def __init__(self, shape: Sequence[int]) -> None:
        self.shape = tuple(int(n) for n in shape)

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        t = _single(inputs[0])
        return reshape_tensor(t, self.shape), t.shape

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        return (_dense(grad).reshape(saved),)


class Take(Primitive):
    """Index a tensor with a tuple of integers (leading axes)."""

    name = "take"

    def __init__(self, index: Sequence[int]) -> None:
        self.index = tuple(int(k) for k in index)

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        t = _single(inputs[0])
        if len(self.index) > t.rank:
            raise PepsArgumentError(f"index {self.index} too long for shape {t.shape}")
        for k, n in zip(self.index, t.shape, strict=False):
            if not 0 <= k < n:
                raise PepsArgumentError(f"index {self.index} out of range for shape {t.shape}")
        return DenseTensor(t.data[self.index]), t.shape

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        out = np.zeros(saved)
        out[self.index] = _dense(grad)
        return (out,)


class Select(Primitive):
    """Pick one output of a multi-output node."""

    name = "select"

    def __init__(self, position: int) -> None:
        self.position = position

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        value = inputs[0]
        if not isinstance(value, tuple):
            raise PepsArgumentError("select needs a multi-output node")
        return value[self.position], len(value)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        parts: list[FloatArray | None] = [None] * saved
        parts[self.position] = _dense(grad)
        return (tuple(parts),)


# =============================================================================
# Elementwise
# =============================================================================


def _same_shape(a: DenseTensor, b: DenseTensor, op: str) -> None:
    if a.shape != b.shape:
        raise PepsDimensionError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


class Add(Primitive):
    name = "add"

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        a, b = (_single(v) for v in inputs)
        _same_shape(a, b, "add")
        return DenseTensor(a.data + b.data), None

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        return grad, grad


class Scale(Primitive):
    """Multiply by a constant scalar."""

    name = "scale"

    def __init__(self, factor: float) -> None:
        self.factor = float(factor)

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        return DenseTensor(_single(inputs[0]).data * self.factor), None

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        return (_dense(grad) * self.factor,)


class Multiply(Primitive):
    name = "multiply"

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        a, b = (_single(v) for v in inputs)
        _same_shape(a, b, "multiply")
        return DenseTensor(a.data * b.data), (a.data, b.data)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        a, b = saved
        g = _dense(grad)
        return g * b, g * a


class Relu(Primitive):
    name = "relu"

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        x = _single(inputs[0]).data
        mask = x > 0
        return DenseTensor(np.where(mask, x, 0.0)), mask

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        return (np.where(saved, _dense(grad), 0.0),)


class Abs(Primitive):
    """Absolute value; the subgradient at 0 is 0."""

    name = "abs"

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        x = _single(inputs[0]).data
        return DenseTensor(np.abs(x)), np.sign(x)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        return (_dense(grad) * saved,)


class MaxPool(Primitive):
    """Non-overlapping max pooling over the first two axes of (H, W, C).

    Ties route the gradient to the first maximum in row-major window order.
    """

    name = "max_pool"

    def __init__(self, window: int = 2) -> None:
        self.window = window

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        x = _single(inputs[0]).data
        p = self.window
        if x.ndim != 3 or x.shape[0] % p or x.shape[1] % p:
            raise PepsDimensionError(f"max pool with window {p} needs (H, W, C) with H, W divisible by {p}")
        h, w, c = x.shape
        blocks = x.reshape(h // p, p, w // p, p, c).transpose(0, 2, 4, 1, 3).reshape(h // p, w // p, c, p * p)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return DenseTensor(out), (arg, x.shape)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        arg, (h, w, c) = saved
        p = self.window
        blocks = np.zeros((h // p, w // p, c, p * p))
        np.put_along_axis(blocks, arg[..., None], _dense(grad)[..., None], axis=-1)
        return (blocks.reshape(h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2).reshape(h, w, c),)


# =============================================================================
# Factorizations
# =============================================================================


def svd_backward(
    u: FloatArray,
    s: FloatArray,
    vh: FloatArray,
    grad_u: FloatArray,
    grad_s: FloatArray,
    grad_vh: FloatArray,
    epsilon: float = DEFAULT_SVD_EPSILON,
) -> FloatArray:
    """Gradient on ``m = u · diag(s) · vh`` from gradients on its factors.

    Every inverse of a singular-value difference, sum, or value is replaced
    by ``x / (x**2 + epsilon)`` so degenerate or vanishing spectra yield
    finite gradients. For separated spectra the result differs from the
    unregularized formula by O(epsilon).

    Args:
        u, s, vh: Full reduced decomposition kept from the forward pass.
        grad_u, grad_s, grad_vh: Upstream gradients, zero-padded to full size.
        epsilon: Regularization strength (> 0).
    """
    v = vh.T
    grad_v = grad_vh.T
    rows, cols, ns = u.shape[0], v.shape[0], s.shape[0]

    diff = s[None, :] - s[:, None]
    f = diff / (diff**2 + epsilon)
    np.fill_diagonal(f, 0.0)
    total = s[None, :] + s[:, None]
    g = total / (total**2 + epsilon)
    np.fill_diagonal(g, 0.0)

    udu = u.T @ grad_u
    vdv = v.T @ grad_v
    su = (f + g) * (udu - udu.T) / 2
    sv = (f - g) * (vdv - vdv.T) / 2

    out: FloatArray = u @ (su + sv + np.diag(grad_s)) @ vh
    s_inv = s / (s**2 + epsilon)
    if rows > ns:
        out = out + (np.eye(rows) - u @ u.T) @ (grad_u * s_inv) @ vh
    if cols > ns:
        out = out + (u * s_inv) @ grad_v.T @ (np.eye(cols) - v @ v.T)
    return out


class Svd(Primitive):
    """Truncated SVD with outputs (u, s, v, discarded_weight).

    The full decomposition is kept and truncated logically, so the backward
    pass differentiates the truncated factors exactly. ``discarded_weight`` is
    a diagnostic and passes no gradient.
    """

    name = "svd"

    def __init__(self, chi: int, epsilon: float = DEFAULT_SVD_EPSILON) -> None:
        if chi < 1:
            raise PepsArgumentError(f"chi must be >= 1, got {chi}")
        if epsilon <= 0:
            raise PepsArgumentError(f"svd epsilon must be > 0, got {epsilon}")
        self.chi = chi
        self.epsilon = epsilon

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        m = _single(inputs[0])
        if m.rank != 2:
            raise PepsArgumentError(f"svd needs a rank-2 tensor, got rank {m.rank}")
        u, s, vh = svd_arrays(m.data)
        k = truncation_rank(s.shape[0], self.chi)
        discarded = math.sqrt(float(np.sum(s[k:] ** 2)))
        out = (DenseTensor(u[:, :k]), DenseTensor(s[:k]), DenseTensor(vh[:k, :]), DenseTensor.scalar(discarded))
        return out, (u, s, vh, k)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        u, s, vh, k = saved
        assert isinstance(grad, tuple)
        grad_u, grad_s, grad_vh, _ = grad
        full_u = np.zeros_like(u)
        full_s = np.zeros_like(s)
        full_vh = np.zeros_like(vh)
        if grad_u is not None:
            full_u[:, :k] = grad_u
        if grad_s is not None:
            full_s[:k] = grad_s
        if grad_vh is not None:
            full_vh[:k, :] = grad_vh
        return (svd_backward(u, s, vh, full_u, full_s, full_vh, self.epsilon),)


def _solve_right_transpose(x: FloatArray, r: FloatArray) -> FloatArray:
    """Return ``x · r^{-T}`` for square upper-triangular ``r``."""
    diag = np.abs(np.diagonal(r))
    if diag.size and diag.min() <= RANK_DEFICIENCY_TOL * max(float(diag.max()), 1.0):
        logger.warning(
            f"QR backward on a rank-deficient matrix (min |r_ii| = {diag.min():.3g}); gradient may be inaccurate"
        )
        result: FloatArray = x @ np.linalg.pinv(r).T
        return result
    return np.asarray(scipy.linalg.solve_triangular(r, x.T, lower=False).T)


def _qr_backward_tall(q: FloatArray, r: FloatArray, grad_q: FloatArray, grad_r: FloatArray) -> FloatArray:
    m = r @ grad_r.T - grad_q.T @ q
    sym = np.tril(m, -1)
    copyltu = sym + sym.T + np.diag(np.diagonal(m))
    return _solve_right_transpose(grad_q + q @ copyltu, r)


def qr_backward(q: FloatArray, r: FloatArray, a: FloatArray, grad_q: FloatArray, grad_r: FloatArray) -> FloatArray:
    """Gradient on ``a = q · r`` from gradients on the reduced factors.

    For wide inputs ``a = [x | y]`` with square ``x`` the rule splits into the
    square case for ``x`` and ``q · grad`` for the ``y`` block.
    """
    rows, cols = a.shape
    if rows >= cols:
        return _qr_backward_tall(q, r, grad_q, grad_r)
    y = a[:, rows:]
    grad_left = grad_r[:, :rows]
    grad_right = grad_r[:, rows:]
    grad_x = _qr_backward_tall(q, r[:, :rows], grad_q + y @ grad_right.T, grad_left)
    grad_y = q @ grad_right
    return np.concatenate([grad_x, grad_y], axis=1)


class Qr(Primitive):
    """Reduced QR with outputs (q, r) and a non-negative diagonal on r."""

    name = "qr"

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        m = _single(inputs[0])
        if m.rank != 2:
            raise PepsArgumentError(f"qr needs a rank-2 tensor, got rank {m.rank}")
        q, r = qr_arrays(m.data)
        return (DenseTensor(q), DenseTensor(r)), (q, r, m.data)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        q, r, a = saved
        assert isinstance(grad, tuple)
        grad_q, grad_r = grad
        gq = np.zeros_like(q) if grad_q is None else grad_q
        gr = np.zeros_like(r) if grad_r is None else grad_r
        return (qr_backward(q, r, a, gq, gr),)


# =============================================================================
# Loss
# =============================================================================


def log_softmax(values: FloatArray, log_scale: float = 0.0) -> FloatArray:
    """Log-probabilities of ``values * exp(log_scale)`` with max subtraction.

    The shift is taken on the mantissas, so entries tied with the maximum stay
    finite however large the scale is.
    """
    gaps = values - np.max(values)
    with np.errstate(over="ignore", invalid="ignore"):
        factor = math.exp(log_scale) if log_scale <= _MAX_LOG_FLOAT else math.inf
        shifted = np.where(gaps == 0.0, 0.0, gaps * factor)
    out: FloatArray = shifted - math.log(float(np.sum(np.exp(shifted))))
    return out


class SoftmaxCrossEntropy(Primitive):
    """Fused ``-log softmax(values * exp(log_scale))[label]``.

    The gradient with respect to ``values`` is ``(p - onehot) * exp(log_scale)``.
    """

    name = "softmax_cross_entropy"

    def __init__(self, label: int, log_scale: float = 0.0) -> None:
        self.label = label
        self.log_scale = log_scale

    def forward(self, *inputs: Value) -> tuple[Value, Any]:
        values = _single(inputs[0]).data.reshape(-1)
        if not 0 <= self.label < values.shape[0]:
            raise PepsArgumentError(f"label {self.label} out of range for {values.shape[0]} classes")
        factor = math.exp(self.log_scale) if self.log_scale <= _MAX_LOG_FLOAT else math.inf
        logp = log_softmax(values, self.log_scale)
        return DenseTensor.scalar(-float(logp[self.label])), (np.exp(logp), factor, values.shape)

    def backward(self, grad: Grad, saved: Any) -> Sequence[Grad | None]:
        probs, factor, shape = saved
        delta = probs.copy()
        delta[self.label] -= 1.0
        return ((float(_dense(grad)) * factor * delta).reshape(shape),)


# =============================================================================
# Recording helpers
# =============================================================================


def contract(tape: Tape, a: int, b: int, axis_pairs: AxisPairs) -> int:
    """Record ``tensor_ops.contract``."""
    return tape.record(Contract(axis_pairs), a, b)


def permute(tape: Tape, t: int, order: Sequence[int]) -> int:
    """Record ``tensor_ops.permute_axes``; identity orders are not recorded."""
    if list(order) == list(range(len(order))) and len(order) == tape.tensor(t).rank:
        return t
    return tape.record(Permute(order), t)


def reshape(tape: Tape, t: int, shape: Sequence[int]) -> int:
    """Record ``tensor_ops.reshape``; no-op reshapes are not recorded."""
    if tuple(shape) == tape.tensor(t).shape:
        return t
    return tape.record(Reshape(shape), t)


def take(tape: Tape, t: int, index: Sequence[int]) -> int:
    return tape.record(Take(index), t)


def select(tape: Tape, node: int, position: int) -> int:
    return tape.record(Select(position), node)


def add(tape: Tape, a: int, b: int) -> int:
    return tape.record(Add(), a, b)


def scale(tape: Tape, t: int, factor: float) -> int:
    return tape.record(Scale(factor), t)


def multiply(tape: Tape, a: int, b: int) -> int:
    return tape.record(Multiply(), a, b)


def relu(tape: Tape, t: int) -> int:
    return tape.record(Relu(), t)


def absolute(tape: Tape, t: int) -> int:
    return tape.record(Abs(), t)


def max_pool(tape: Tape, t: int, window: int = 2) -> int:
    return tape.record(MaxPool(window), t)


def sum_all(tape: Tape, t: int) -> int:
    """Sum of all entries, as a contraction with a constant all-ones tensor."""
    value = tape.tensor(t)
    ones = tape.constant(DenseTensor(np.ones(value.shape)))
    return contract(tape, t, ones, [(k, k) for k in range(value.rank)])


class SvdNodes(NamedTuple):
    """Node ids of a recorded truncated SVD plus its discarded weight."""

    u: int
    s: int
    v: int
    discarded_weight: float


def svd_truncated(tape: Tape, m: int, chi: int, epsilon: float = DEFAULT_SVD_EPSILON) -> SvdNodes:
    """Record a truncated SVD and split its outputs."""
    node = tape.record(Svd(chi, epsilon), m)
    outputs = tape.value(node)
    assert isinstance(outputs, tuple)
    discarded = outputs[3].item()
    return SvdNodes(select(tape, node, 0), select(tape, node, 1), select(tape, node, 2), discarded)


def qr_reduced(tape: Tape, m: int) -> tuple[int, int]:
    """Record a reduced QR and split its outputs."""
    node = tape.record(Qr(), m)
    return select(tape, node, 0), select(tape, node, 1)


def scale_columns(tape: Tape, u: int, s: int) -> int:
    """``u · diag(s)`` for a matrix ``u`` and vector ``s``."""
    rows = tape.tensor(u).shape[0]
    ones = tape.constant(DenseTensor(np.ones(rows)))
    spread = contract(tape, ones, s, [])
    return multiply(tape, u, spread)


def scale_rows(tape: Tape, s: int, v: int) -> int:
    """``diag(s) · v`` for a vector ``s`` and matrix ``v``."""
    cols = tape.tensor(v).shape[1]
    ones = tape.constant(DenseTensor(np.ones(cols)))
    spread = contract(tape, s, ones, [])
    return multiply(tape, spread, v)


def max_abs_normalize(tape: Tape, t: int) -> tuple[int, float]:
    """Divide by the largest |entry| and return the log of the factor.

    The factor is a constant for differentiation. All-zero or non-finite
    tensors are passed through with a zero log factor.
    """
    peak = float(np.max(np.abs(tape.tensor(t).data)))
    if peak == 0.0 or not math.isfinite(peak):
        return t, 0.0
    return scale(tape, t, 1.0 / peak), math.log(peak)


def softmax_cross_entropy(tape: Tape, values: int, label: int, log_scale: float = 0.0) -> int:
    """Record the fused loss on a logit vector."""
    return tape.record(SoftmaxCrossEntropy(label, log_scale), values)
