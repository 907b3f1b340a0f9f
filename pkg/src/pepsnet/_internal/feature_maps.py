"""Feature maps lifting an image into a grid of per-site vectors."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from functools import reduce

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import PepsArgumentError, PepsDimensionError
from ..types import ConvParams, DenseTensor, FeatureGrid, FloatArray
from . import ops
from .tape import Tape

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 2
CONV_CHANNELS = 10
CONV_KERNEL_SIZE = 5
CONV_PADDING = 2
POOL_WINDOW = 2


def _check_pixels(pixels: FloatArray) -> None:
    if pixels.size and not (np.all(pixels >= 0.0) and np.all(pixels <= 1.0)):
        raise PepsArgumentError("pixels must lie in [0, 1]; normalize raw bytes by dividing by 255 first")


def pixel_embed(x: float) -> FloatArray:
    """Map an intensity to ``(cos(πx/2), sin(πx/2))``."""
    if not 0.0 <= x <= 1.0:
        raise PepsArgumentError(f"pixel value {x} outside [0, 1]")
    angle = math.pi * x / 2
    return np.array([math.cos(angle), math.sin(angle)])


def block_embed(block: Sequence[float] | FloatArray, block_size: int = DEFAULT_BLOCK_SIZE) -> FloatArray:
    """Kronecker product of the pixel embeddings of one block.

    Pixels are taken in row-major block order (NW, NE, SW, SE for 2×2), the
    first pixel being the most significant index of the result.

    Raises:
        PepsArgumentError: If the block does not hold ``block_size**2`` pixels.
    """
    pixels = np.asarray(block, dtype=np.float64).reshape(-1)
    if pixels.size != block_size * block_size:
        raise PepsArgumentError(f"expected {block_size * block_size} pixels per block, got {pixels.size}")
    return reduce(np.kron, [pixel_embed(float(p)) for p in pixels])


def product_state_map(image: FloatArray, block_size: int = DEFAULT_BLOCK_SIZE) -> FeatureGrid:
    """Blocked product-state feature map.

    Odd image sides are padded with zero-intensity pixels. Cell ``(i, j)``
    holds the block embedding of the pixels
    ``{n·i .. n·i+n-1} × {n·j .. n·j+n-1}`` with ``n = block_size``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise PepsDimensionError(f"image must be square, got shape {img.shape}")
    _check_pixels(img)
    remainder = img.shape[0] % block_size
    if remainder:
        pad = block_size - remainder
        img = np.pad(img, ((0, pad), (0, pad)))

    angle = np.pi * img / 2
    embedded = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    side = img.shape[0] // block_size

    vectors = np.ones((side, side, 1))
    for di in range(block_size):
        for dj in range(block_size):
            part = embedded[di::block_size, dj::block_size]
            vectors = (vectors[..., :, None] * part[..., None, :]).reshape(side, side, -1)
    return FeatureGrid(vectors)


def init_conv_params(
    seed: int,
    channels: int = CONV_CHANNELS,
    kernel_size: int = CONV_KERNEL_SIZE,
) -> ConvParams:
    """Uniform(-s, s) filters and biases with ``s = 1/sqrt(fan_in)``."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(kernel_size * kernel_size)
    kernels = rng.uniform(-bound, bound, size=(channels, kernel_size, kernel_size))
    biases = rng.uniform(-bound, bound, size=channels)
    return ConvParams(kernels, biases)


def im2col(image: FloatArray, kernel_size: int, padding: int) -> FloatArray:
    """Zero-padded stride-1 patches of shape (H', W', k·k) in row-major tap order."""
    padded = np.pad(np.asarray(image, dtype=np.float64), padding)
    windows = sliding_window_view(padded, (kernel_size, kernel_size))
    return np.ascontiguousarray(windows.reshape(windows.shape[0], windows.shape[1], kernel_size * kernel_size))


def conv_feature_map(
    tape: Tape,
    image: FloatArray,
    kernels: int,
    biases: int,
    padding: int = CONV_PADDING,
    pool: int = POOL_WINDOW,
) -> int:
    """Record convolution, bias, ReLU and max pooling of one image.

    Args:
        tape: Tape to record on.
        image: (H, W) pixels in [0, 1].
        kernels: Node holding filters of shape (C, k, k).
        biases: Node holding C biases.
        padding: Zero padding per side.
        pool: Max-pool window.

    Returns:
        Node id of the (H'/pool, W'/pool, C) feature grid.
    """
    img = np.asarray(image, dtype=np.float64)
    _check_pixels(img)
    channels, k, _ = tape.tensor(kernels).shape
    patches = im2col(img, k, padding)
    rows, cols, _ = patches.shape

    flat = ops.reshape(tape, kernels, (channels, k * k))
    conv = ops.contract(tape, tape.constant(DenseTensor(patches)), flat, [(2, 1)])
    spread = ops.contract(tape, tape.constant(DenseTensor(np.ones((rows, cols)))), biases, [])
    activated = ops.relu(tape, ops.add(tape, conv, spread))
    return ops.max_pool(tape, activated, pool)


def conv_features(image: FloatArray, params: ConvParams) -> FeatureGrid:
    """Evaluate the convolutional map without recording gradients."""
    tape = Tape(grad_enabled=False)
    kernels = tape.constant(DenseTensor(params.kernels))
    biases = tape.constant(DenseTensor(params.biases))
    return FeatureGrid(tape.tensor(conv_feature_map(tape, image, kernels, biases)).data)
