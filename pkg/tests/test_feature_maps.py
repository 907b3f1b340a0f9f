"""Tests for the product-state and convolutional feature maps."""

import math

import numpy as np
import pytest
from conftest import assert_gradients_close, finite_difference

from pepsnet._internal import ops
from pepsnet._internal.feature_maps import (
    block_embed,
    conv_feature_map,
    conv_features,
    init_conv_params,
    pixel_embed,
    product_state_map,
)
from pepsnet._internal.tape import Tape
from pepsnet.exceptions import PepsArgumentError, PepsDimensionError
from pepsnet.types import ConvParams, DenseTensor


def _conv_oracle(image: np.ndarray, params: ConvParams) -> np.ndarray:
    """Convolution, ReLU and 2x2 max pool by explicit loops."""
    k = params.kernel_size
    pad = k // 2
    padded = np.pad(image, pad)
    h, w = image.shape
    conv = np.zeros((h, w, params.channels))
    for c in range(params.channels):
        for y in range(h):
            for x in range(w):
                total = params.biases[c]
                for dy in range(k):
                    for dx in range(k):
                        total += params.kernels[c, dy, dx] * padded[y + dy, x + dx]
                conv[y, x, c] = max(total, 0.0)
    pooled = np.zeros((h // 2, w // 2, params.channels))
    for y in range(h // 2):
        for x in range(w // 2):
            pooled[y, x] = conv[2 * y : 2 * y + 2, 2 * x : 2 * x + 2].max(axis=(0, 1))
    return pooled


class TestPixelEmbedding:
    def test_black_and_white(self):
        np.testing.assert_allclose(pixel_embed(0.0), [1.0, 0.0])
        np.testing.assert_allclose(pixel_embed(1.0), [0.0, 1.0], atol=1e-15)

    def test_unit_norm(self, rng):
        norms = np.array([np.linalg.norm(pixel_embed(float(x))) for x in rng.uniform(size=10_000)])
        np.testing.assert_allclose(norms, 1.0, rtol=0, atol=1e-12)

    def test_half_intensity(self):
        np.testing.assert_allclose(pixel_embed(0.5), [math.sqrt(0.5), math.sqrt(0.5)])

    @pytest.mark.parametrize("x", [-0.1, 1.5])
    def test_out_of_range(self, x):
        with pytest.raises(PepsArgumentError):
            pixel_embed(x)


class TestBlockEmbedding:
    def test_black_block_is_first_basis_vector(self):
        expected = np.zeros(16)
        expected[0] = 1.0
        np.testing.assert_allclose(block_embed([0.0, 0.0, 0.0, 0.0]), expected)

    def test_first_pixel_is_most_significant(self):
        out = block_embed([1.0, 0.0, 0.0, 0.0])
        assert int(np.argmax(out)) == 8
        assert out[8] == pytest.approx(1.0)

    def test_last_pixel_is_least_significant(self):
        assert int(np.argmax(block_embed([0.0, 0.0, 0.0, 1.0]))) == 1

    def test_unit_norm(self, rng):
        vectors = product_state_map(rng.uniform(size=(200, 200))).vectors
        assert vectors.shape == (100, 100, 16)
        np.testing.assert_allclose(np.linalg.norm(vectors, axis=-1), 1.0, rtol=0, atol=1e-12)
        norms = [np.linalg.norm(block_embed(rng.uniform(size=4))) for _ in range(1_000)]
        np.testing.assert_allclose(norms, 1.0, rtol=0, atol=1e-12)

    def test_single_pixel_blocks(self):
        np.testing.assert_allclose(block_embed([0.0], block_size=1), [1.0, 0.0])

    def test_wrong_pixel_count(self):
        with pytest.raises(PepsArgumentError):
            block_embed([0.0, 0.0, 0.0])


class TestProductStateMap:
    def test_mnist_geometry(self):
        grid = product_state_map(np.zeros((28, 28)))
        assert grid.size == 14
        assert grid.dim == 16

    def test_single_white_pixel(self):
        image = np.zeros((28, 28))
        image[0, 0] = 1.0
        grid = product_state_map(image)
        expected = np.zeros(16)
        expected[8] = 1.0
        np.testing.assert_allclose(grid.vectors[0, 0], expected, atol=1e-15)
        black = np.zeros(16)
        black[0] = 1.0
        np.testing.assert_allclose(grid.vectors[0, 1], black)
        np.testing.assert_allclose(grid.vectors[13, 13], black)

    def test_matches_block_embedding(self, rng):
        image = rng.uniform(size=(6, 6))
        grid = product_state_map(image)
        for i in range(3):
            for j in range(3):
                block = image[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].reshape(-1)
                np.testing.assert_allclose(grid.vectors[i, j], block_embed(block), atol=1e-15)

    def test_odd_side_is_padded_black(self, rng):
        image = rng.uniform(size=(5, 5))
        grid = product_state_map(image)
        assert grid.size == 3
        corner = block_embed([image[4, 4], 0.0, 0.0, 0.0])
        np.testing.assert_allclose(grid.vectors[2, 2], corner, atol=1e-15)

    def test_unblocked(self, rng):
        image = rng.uniform(size=(3, 3))
        grid = product_state_map(image, block_size=1)
        assert (grid.size, grid.dim) == (3, 2)
        np.testing.assert_allclose(grid.vectors[1, 2], pixel_embed(float(image[1, 2])))

    def test_non_square(self):
        with pytest.raises(PepsDimensionError):
            product_state_map(np.zeros((4, 6)))

    def test_pixels_out_of_range(self):
        with pytest.raises(PepsArgumentError):
            product_state_map(np.full((4, 4), 2.0))


class TestConvFeatureMap:
    def test_matches_loop_oracle(self, rng):
        params = init_conv_params(seed=3)
        image = rng.uniform(size=(8, 8))
        grid = conv_features(image, params)
        assert (grid.size, grid.dim) == (4, 10)
        np.testing.assert_allclose(grid.vectors, _conv_oracle(image, params), atol=1e-12)

    def test_centered_identity_filter_pools_the_image(self, rng):
        kernels = np.zeros((1, 5, 5))
        kernels[0, 2, 2] = 1.0
        image = rng.uniform(size=(6, 6))
        grid = conv_features(image, ConvParams(kernels, np.zeros(1)))
        expected = image.reshape(3, 2, 3, 2).max(axis=(1, 3))
        np.testing.assert_allclose(grid.vectors[..., 0], expected)

    def test_mnist_geometry(self):
        grid = conv_features(np.zeros((28, 28)), init_conv_params(seed=0))
        assert (grid.size, grid.dim) == (14, 10)

    def test_init_is_seeded_and_bounded(self):
        a = init_conv_params(seed=5)
        b = init_conv_params(seed=5)
        np.testing.assert_array_equal(a.kernels, b.kernels)
        assert np.all(np.abs(a.kernels) <= 0.2)
        assert a.biases.shape == (10,)

    def test_kernel_gradient(self, rng):
        params = init_conv_params(seed=1, channels=2)
        image = rng.uniform(size=(4, 4))
        weights = rng.normal(size=(2, 2, 2))

        def build(tape, kernels):
            biases = tape.constant(DenseTensor(params.biases))
            out = conv_feature_map(tape, image, kernels, biases)
            w = tape.constant(DenseTensor(weights))
            return ops.contract(tape, out, w, [(0, 0), (1, 1), (2, 2)])

        tape = Tape()
        leaf = tape.leaf(DenseTensor(params.kernels), "k")
        analytic = tape.backward(build(tape, leaf)).named()["k"]

        def fn(values):
            t = Tape(grad_enabled=False)
            return t.tensor(build(t, t.constant(DenseTensor(values)))).item()

        assert_gradients_close(analytic, finite_difference(fn, params.kernels))
