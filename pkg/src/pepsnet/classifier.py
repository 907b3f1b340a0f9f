"""PEPS image classifier: feature map, weight grid and contraction in one object."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ._internal import ops
from ._internal.contraction import ContractionResult, bidirectional_contract, exact_contract
from ._internal.feature_maps import (
    CONV_CHANNELS,
    CONV_KERNEL_SIZE,
    CONV_PADDING,
    POOL_WINDOW,
    conv_feature_map,
    conv_features,
    init_conv_params,
    product_state_map,
)
from ._internal.losses import record_cross_entropy, softmax
from ._internal.peps import (
    PepsGrid,
    absorb_features,
    apply_positivity,
    init_grid,
    parameter_count,
    register_grid,
)
from ._internal.serialization import load_checkpoint, save_checkpoint
from ._internal.tape import Tape
from .config import TrainConfig
from .exceptions import PepsCheckpointError, PepsConfigError, PepsDimensionError, PepsError
from .types import ContractionKind, ConvParams, DenseTensor, FeatureGrid, FeatureMapKind, FloatArray, Logits

logger = logging.getLogger(__name__)

KERNELS = "conv_kernels"
BIASES = "conv_biases"
DEFAULT_IMAGE_SIDE = 28

# Config fields that fix the shape of a checkpoint's arrays.
_SHAPE_FIELDS = ("bond_dim", "label_count", "feature_map", "block_size")


@dataclass(frozen=True, slots=True)
class SampleGradient:
    """Loss, prediction and parameter gradients of one sample.

    Attributes:
        loss: Cross-entropy of the sample (NaN or inf when the forward pass broke down).
        predicted: Argmax of the logits.
        grads: Gradient per parameter name.
        discarded_weight: Largest truncation discarded weight in the contraction.
    """

    loss: float
    predicted: int
    grads: dict[str, FloatArray]
    discarded_weight: float = 0.0


def lattice_geometry(config: TrainConfig, image_side: int) -> tuple[int, int]:
    """Lattice side L and physical dimension d for square images of side ``image_side``."""
    if config.feature_map is FeatureMapKind.PRODUCT:
        return math.ceil(image_side / config.block_size), 2 ** (config.block_size**2)
    conv_side = image_side + 2 * CONV_PADDING - CONV_KERNEL_SIZE + 1
    if conv_side % POOL_WINDOW:
        raise PepsDimensionError(f"convolution output side {conv_side} is not divisible by the pool window")
    return conv_side // POOL_WINDOW, CONV_CHANNELS


class PepsClassifier:
    """Supervised image classifier backed by a PEPS weight tensor.

    Instances are immutable: training produces new classifiers through
    ``with_parameters``, so one instance can be shared by concurrent workers.

    Example:
        ```python
        from pepsnet import PepsClassifier, TrainConfig

        model = PepsClassifier.create(TrainConfig(bond_dim=2, chi=10))
        probs = model.predict_proba(image)
        ```
    """

    def __init__(
        self,
        grid: PepsGrid,
        config: TrainConfig,
        conv: ConvParams | None = None,
        feature_scale: float = 1.0,
        image_side: int = DEFAULT_IMAGE_SIDE,
    ) -> None:
        """Assemble a classifier from its parts.

        Args:
            grid: PEPS weight grid.
            config: Hyperparameters (feature map, contraction, χ, ...).
            conv: Convolution parameters, required for the conv feature map.
            feature_scale: Factor applied to every feature vector.
            image_side: Side length of the square input images.

        Raises:
            PepsConfigError: If the parts do not fit the configuration.
        """
        if config.feature_map is FeatureMapKind.CONV and conv is None:
            raise PepsConfigError("the conv feature map needs convolution parameters")
        size, dim = lattice_geometry(config, image_side)
        if grid.size != size or grid.phys_dim != dim:
            raise PepsConfigError(
                f"grid is {grid.size}x{grid.size} with d={grid.phys_dim}; "
                f"{config.feature_map.value} features of {image_side}px images need {size}x{size} with d={dim}"
            )
        if not feature_scale > 0.0 or not math.isfinite(feature_scale):
            raise PepsConfigError(f"feature_scale must be positive and finite, got {feature_scale}")
        self._grid = grid
        self._config = config
        self._conv = conv if config.feature_map is FeatureMapKind.CONV else None
        self._feature_scale = float(feature_scale)
        self._image_side = image_side

    @classmethod
    def create(cls, config: TrainConfig, image_side: int = DEFAULT_IMAGE_SIDE) -> PepsClassifier:
        """Freshly initialized classifier (seeded from ``config.seed``)."""
        size, dim = lattice_geometry(config, image_side)
        grid = init_grid(size, config.bond_dim, dim, config.label_count, config.seed, config.positivity)
        conv = init_conv_params(config.seed + 1) if config.feature_map is FeatureMapKind.CONV else None
        return cls(grid, config, conv, config.feature_scale or 1.0, image_side)

    # =========================================================================
    # Properties
    # =========================================================================

    @property
    def grid(self) -> PepsGrid:
        return self._grid

    @property
    def config(self) -> TrainConfig:
        return self._config

    @property
    def conv(self) -> ConvParams | None:
        return self._conv

    @property
    def feature_scale(self) -> float:
        return self._feature_scale

    @property
    def image_side(self) -> int:
        return self._image_side

    @property
    def site_count(self) -> int:
        """Number of lattice sites; logits scale as ``feature_scale ** site_count``."""
        return self._grid.size * self._grid.size

    def parameters(self) -> dict[str, FloatArray]:
        """All trainable arrays keyed by name."""
        params = self._grid.parameters()
        if self._conv is not None:
            params[KERNELS] = self._conv.kernels
            params[BIASES] = self._conv.biases
        return params

    def parameter_count(self) -> int:
        """Number of trainable scalars."""
        return sum(int(p.size) for p in self.parameters().values())

    def with_parameters(self, params: Mapping[str, FloatArray]) -> PepsClassifier:
        """New classifier with some or all parameters replaced."""
        conv = self._conv
        if conv is not None and (KERNELS in params or BIASES in params):
            conv = ConvParams(params.get(KERNELS, conv.kernels), params.get(BIASES, conv.biases))
        return PepsClassifier(
            self._grid.with_parameters(params), self._config, conv, self._feature_scale, self._image_side
        )

    def with_positivity_applied(self) -> PepsClassifier:
        """Project the grid onto non-negative entries if the model trains with positivity."""
        if not self._grid.positivity:
            return self
        return PepsClassifier(
            apply_positivity(self._grid), self._config, self._conv, self._feature_scale, self._image_side
        )

    def with_config(self, config: TrainConfig) -> PepsClassifier:
        """Same parameters under a new configuration.

        Only settings that leave the parameter shapes alone may change; the
        positivity flag stays that of the grid.

        Raises:
            PepsCheckpointError: If a shape-defining field (D, T, feature map,
                block size) differs.
        """
        for name in _SHAPE_FIELDS:
            ours, theirs = getattr(self._config, name), getattr(config, name)
            if ours != theirs:
                raise PepsCheckpointError(f"model has {name}={ours!r}, configuration asks for {theirs!r}")
        config = dataclasses.replace(config, positivity=self._grid.positivity)
        return PepsClassifier(self._grid, config, self._conv, self._feature_scale, self._image_side)

    def with_feature_scale(self, feature_scale: float) -> PepsClassifier:
        return PepsClassifier(self._grid, self._config, self._conv, feature_scale, self._image_side)

    # =========================================================================
    # Forward
    # =========================================================================

    def features(self, image: FloatArray) -> FeatureGrid:
        """Scaled feature grid of one image."""
        if self._conv is not None:
            grid = conv_features(image, self._conv)
        else:
            grid = product_state_map(image, self._config.block_size)
        return FeatureGrid(grid.vectors * self._feature_scale)

    def _check_image(self, image: FloatArray) -> FloatArray:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (self._image_side, self._image_side):
            raise PepsDimensionError(f"expected a {self._image_side}x{self._image_side} image, got {img.shape}")
        return img

    def record(self, tape: Tape, image: FloatArray) -> ContractionResult:
        """Record the forward pass of one image on ``tape``.

        Parameters become named leaves when the tape records gradients.
        """
        img = self._check_image(image)
        trainable = tape.grad_enabled
        site_nodes = register_grid(tape, self._grid, trainable)

        features: FeatureGrid | int
        if self._conv is not None:
            kernels = DenseTensor(self._conv.kernels)
            biases = DenseTensor(self._conv.biases)
            k_node = tape.leaf(kernels, KERNELS) if trainable else tape.constant(kernels)
            b_node = tape.leaf(biases, BIASES) if trainable else tape.constant(biases)
            features = conv_feature_map(tape, img, k_node, b_node)
            if self._feature_scale != 1.0:
                features = ops.scale(tape, features, self._feature_scale)
        else:
            features = self.features(img)

        absorbed = absorb_features(tape, self._grid, site_nodes, features)
        if self._config.contraction is ContractionKind.EXACT or absorbed.size == 1:
            return exact_contract(absorbed)
        return bidirectional_contract(
            absorbed,
            chi=self._config.chi,
            epsilon=self._config.svd_epsilon,
            checkpoint_rows=self._config.checkpoint_rows,
        )

    def logits(self, image: FloatArray) -> Logits:
        """Scale-tracked logits of one image (no gradient recording)."""
        return self.record(Tape(grad_enabled=False), image).logits

    def predict_proba(self, image: FloatArray) -> FloatArray:
        """Softmax class probabilities of one image."""
        return softmax(self.logits(image))

    def predict(self, image: FloatArray) -> int:
        """Most probable label; ties resolve to the lowest index."""
        return self.logits(image).argmax()

    def log_magnitude(self, image: FloatArray) -> float:
        """Natural log of the largest |logit| (``-inf`` if all logits vanish)."""
        logits = self.logits(image)
        peak = float(np.max(np.abs(logits.values)))
        return math.log(peak) + logits.log_scale if peak > 0.0 else -math.inf

    def loss_and_grads(self, image: FloatArray, label: int) -> SampleGradient:
        """Forward and backward pass of one labelled image."""
        tape = Tape()
        result = self.record(tape, image)
        loss_node = record_cross_entropy(tape, result.node, label, result.log_scale)
        grads = tape.backward(loss_node).named()
        return SampleGradient(
            loss=tape.tensor(loss_node).item(),
            predicted=int(np.argmax(tape.tensor(result.node).data)),
            grads=grads,
            discarded_weight=max(result.discarded_weights, default=0.0),
        )

    # =========================================================================
    # Persistence
    # =========================================================================

    def describe(self) -> dict[str, Any]:
        """Summary used by ``inspect``."""
        low, high = self._grid.entry_range()
        return {
            "L": self._grid.size,
            "D": self._grid.bond_dim,
            "d": self._grid.phys_dim,
            "T": self._grid.label_count,
            "center": list(self._grid.center),
            "feature_map": self._config.feature_map.value,
            "feature_scale": self._feature_scale,
            "peps_parameters": parameter_count(self._grid),
            "parameters": self.parameter_count(),
            "min_entry": low,
            "max_entry": high,
            "positivity": self._grid.positivity,
        }

    def save(self, path: Path) -> None:
        """Write an atomic checkpoint."""
        metadata = {
            "L": self._grid.size,
            "D": self._grid.bond_dim,
            "d": self._grid.phys_dim,
            "T": self._grid.label_count,
            "center": list(self._grid.center),
            "positivity": self._grid.positivity,
            "feature_map": self._config.feature_map.value,
            "feature_scale": self._feature_scale,
            "image_side": self._image_side,
            "config": self._config.to_dict(),
        }
        save_checkpoint(path, metadata, self.parameters())

    @classmethod
    def load(cls, path: Path, expected: TrainConfig | None = None) -> PepsClassifier:
        """Read a checkpoint.

        Args:
            path: Checkpoint file.
            expected: If given, the shape-defining fields (D, T, feature map,
                block size) must match; other fields (χ, contraction, ...) are
                taken from ``expected``.

        Raises:
            PepsCheckpointError: If the file is malformed or does not match.
        """
        header, arrays = load_checkpoint(path)
        try:
            stored = TrainConfig(**header["config"])
            image_side = int(header["image_side"])
            size, dim = lattice_geometry(stored, image_side)
            if (size, dim, stored.bond_dim) != (int(header["L"]), int(header["d"]), int(header["D"])):
                raise PepsCheckpointError("checkpoint header disagrees with its stored configuration")
            template = init_grid(size, stored.bond_dim, dim, stored.label_count, 0, bool(header["positivity"]))
            names = set(template.parameters())
            missing = names - set(arrays)
            if missing:
                raise PepsCheckpointError(f"checkpoint lacks {len(missing)} site tensors")
            grid = template.with_parameters({name: arrays[name] for name in names})
            conv = None
            if stored.feature_map is FeatureMapKind.CONV:
                conv = ConvParams(arrays[KERNELS], arrays[BIASES])
            model = cls(grid, stored, conv, float(header["feature_scale"]), image_side)
        except PepsCheckpointError:
            raise
        except (KeyError, TypeError, ValueError, PepsError) as e:
            raise PepsCheckpointError(f"checkpoint {path} does not describe a valid model: {e}") from e
        return model if expected is None else model.with_config(expected)
