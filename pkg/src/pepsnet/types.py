"""Type definitions for the pepsnet library."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, StrEnum
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .exceptions import PepsArgumentError, PepsDimensionError

_MAX_LOG_FLOAT = 709.0

type FloatArray = NDArray[np.float64]
type IntArray = NDArray[np.int64]


class AxisLabel(StrEnum):
    """Advisory tags for tensor axes. Kernels never validate them."""

    NORTH = "virtual-N"
    EAST = "virtual-E"
    SOUTH = "virtual-S"
    WEST = "virtual-W"
    PHYSICAL = "physical"
    LABEL = "label"


def _freeze(data: Any) -> FloatArray:
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    else:
        arr = arr.view()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, slots=True, eq=False)
class DenseTensor:
    """Rank-k real tensor in row-major order with 64-bit entries.

    Values are immutable after construction and safe to share across threads.

    Attributes:
        data: Read-only C-contiguous float64 array. Rank 0 is a scalar.
        axis_labels: Optional per-axis tags, one per axis.

    Example:
        ```python
        t = DenseTensor(np.arange(6.0).reshape(2, 3))
        t.shape  # (2, 3)
        ```
    """

    data: FloatArray
    axis_labels: tuple[AxisLabel | None, ...] | None = None

    def __post_init__(self) -> None:
        """Copy into canonical layout and validate extents."""
        arr = _freeze(self.data)
        if any(n < 1 for n in arr.shape):
            raise PepsDimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        if self.axis_labels is not None and len(self.axis_labels) != arr.ndim:
            raise PepsDimensionError(f"{len(self.axis_labels)} axis labels given for a rank-{arr.ndim} tensor")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        """Axis extents."""
        return tuple(int(n) for n in self.data.shape)

    @property
    def rank(self) -> int:
        """Number of axes."""
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        """Number of entries (product of extents)."""
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a rank-0 or single-entry tensor."""
        if self.size != 1:
            raise PepsDimensionError(f"item() needs a single-entry tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    @classmethod
    def scalar(cls, value: float) -> DenseTensor:
        """Build a rank-0 tensor."""
        return cls(np.asarray(value, dtype=np.float64))

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape}, labels={self.axis_labels})"


@dataclass(frozen=True, slots=True, eq=False)
class SvdResult:
    """Truncated singular value decomposition ``m ≈ u · diag(s) · v``.

    Attributes:
        u: Left isometry, rows × k.
        s: Kept singular values, non-increasing, non-negative.
        v: Right isometry, k × cols.
        discarded_weight: sqrt of the summed squares of the dropped values.
    """

    u: DenseTensor
    s: DenseTensor
    v: DenseTensor
    discarded_weight: float

    @property
    def kept(self) -> int:
        """Number of retained singular values."""
        return self.s.shape[0]

    def reconstruct(self) -> FloatArray:
        """Return ``u · diag(s) · v`` as a dense matrix."""
        return (self.u.data * self.s.data) @ self.v.data


@dataclass(frozen=True, slots=True, eq=False)
class FeatureGrid:
    """L × L grid of d-dimensional feature vectors.

    Attributes:
        vectors: Array of shape (L, L, d).
    """

    vectors: FloatArray

    def __post_init__(self) -> None:
        """Validate grid geometry."""
        arr = _freeze(self.vectors)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
            raise PepsDimensionError(f"feature grid must have shape (L, L, d), got {arr.shape}")
        object.__setattr__(self, "vectors", arr)

    @property
    def size(self) -> int:
        """Lattice side L."""
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        """Feature dimension d."""
        return int(self.vectors.shape[2])


@dataclass(slots=True, eq=False)
class ConvParams:
    """Trainable parameters of the one-layer convolutional feature map.

    Attributes:
        kernels: Filters of shape (channels, k, k).
        biases: One bias per channel.
    """

    kernels: FloatArray
    biases: FloatArray

    def __post_init__(self) -> None:
        """Validate shapes."""
        self.kernels = np.array(self.kernels, dtype=np.float64)
        self.biases = np.array(self.biases, dtype=np.float64)
        if self.kernels.ndim != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise PepsDimensionError(f"kernels must have shape (channels, k, k), got {self.kernels.shape}")
        if self.biases.shape != (self.kernels.shape[0],):
            raise PepsDimensionError(f"biases must have shape ({self.kernels.shape[0]},), got {self.biases.shape}")

    @property
    def channels(self) -> int:
        """Number of filters (output feature dimension)."""
        return int(self.kernels.shape[0])

    @property
    def kernel_size(self) -> int:
        """Side length of each filter."""
        return int(self.kernels.shape[1])


@dataclass(frozen=True, slots=True)
class Logits:
    """Pre-softmax scores with an explicit scale.

    The represented logit for label ``l`` is ``values[l] * exp(log_scale)``.

    Attributes:
        values: T-vector of finite reals.
        log_scale: Natural log of the factor extracted during contraction.
    """

    values: FloatArray
    log_scale: float = 0.0

    def __post_init__(self) -> None:
        """Validate finiteness."""
        arr = _freeze(self.values).reshape(-1)
        if not np.all(np.isfinite(arr)) or not math.isfinite(self.log_scale):
            raise PepsArgumentError("logits must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def label_count(self) -> int:
        """Number of labels T."""
        return int(self.values.shape[0])

    def true_values(self) -> FloatArray:
        """Return ``values * exp(log_scale)`` (may overflow to inf for huge scales)."""
        if self.log_scale > _MAX_LOG_FLOAT:
            out = np.zeros_like(self.values)
            out[self.values > 0] = np.inf
            out[self.values < 0] = -np.inf
            return out
        return self.values * math.exp(self.log_scale)

    def argmax(self) -> int:
        """Predicted label; ties resolve to the lowest index."""
        return int(np.argmax(self.values))


class FeatureMapKind(str, Enum):
    """Feature map applied to each image."""

    PRODUCT = "product"
    """Fixed product-state map with blocking."""

    CONV = "conv"
    """Trainable one-layer convolution + ReLU + 2×2 max pool."""


class OptimizerKind(str, Enum):
    """Parameter update rule."""

    SGD = "sgd"
    ADAM = "adam"


class ContractionKind(str, Enum):
    """How logits are computed from an absorbed grid."""

    BOUNDARY = "boundary"
    """Bidirectional boundary-MPS contraction with χ truncation."""

    EXACT = "exact"
    """Exact contraction (small grids only)."""


class Split(str, Enum):
    """Dataset partition tag."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class DatasetKind(str, Enum):
    """Which IDX dataset to read."""

    MNIST = "mnist"
    FASHION_MNIST = "fashion-mnist"


@dataclass(frozen=True, slots=True, eq=False)
class Dataset:
    """Normalized images with integer labels.

    Attributes:
        images: Array of shape (N, H, W), pixels in [0, 1].
        labels: Array of N integers in 0..label_count-1.
        split: Partition tag.
        label_count: Number of classes.
    """

    images: FloatArray
    labels: IntArray
    split: Split = Split.TRAIN
    label_count: int = 10

    def __post_init__(self) -> None:
        """Validate lengths and ranges."""
        images = _freeze(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        if images.ndim != 3:
            raise PepsDimensionError(f"images must have shape (N, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise PepsDimensionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.label_count):
            raise PepsArgumentError(f"labels must lie in 0..{self.label_count - 1}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise PepsArgumentError("pixels must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def select(self, indices: NDArray[np.intp] | list[int], split: Split | None = None) -> Dataset:
        """Return the samples at ``indices`` (in that order)."""
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.label_count)


@dataclass(frozen=True, slots=True)
class SplitMetrics:
    """Accuracy and mean loss of a model on one dataset.

    Attributes:
        accuracy: Fraction of samples whose argmax logit equals the label.
        mean_loss: Mean cross-entropy.
        count: Number of samples evaluated.
        predictions: Predicted label per sample.
    """

    accuracy: float
    mean_loss: float
    count: int
    predictions: tuple[int, ...] = field(default=(), repr=False)


@dataclass(frozen=True, slots=True)
class Metrics:
    """One row of the per-epoch metrics file.

    Attributes:
        epoch: 1-based epoch number.
        train_loss: Mean training loss over the epoch's batches.
        train_acc: Training accuracy measured at the end of the epoch.
        val_acc: Validation accuracy.
        test_acc: Test accuracy.
        seconds: Wall-clock duration of the epoch.
    """

    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    seconds: float

    def to_row(self) -> list[str]:
        """Serialize for the comma-separated metrics file."""
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.train_acc),
            repr(self.val_acc),
            repr(self.test_acc),
            f"{self.seconds:.3f}",
        ]


METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_acc", "test_acc", "seconds"]
