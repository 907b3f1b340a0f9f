"""Tests for exact and boundary-MPS contraction."""

import logging
import math

import numpy as np
import pytest
from conftest import (
    absorbed,
    assert_gradients_close,
    dense_oracle,
    finite_difference,
    random_features,
    random_grid,
)

from pepsnet._internal import ops
from pepsnet._internal.contraction import (
    BoundaryMps,
    apply_row,
    bidirectional_contract,
    canonicalize,
    exact_contract,
    to_dense,
    trivial_mps,
)
from pepsnet._internal.peps import PepsGrid, site_labels, site_name, site_shape
from pepsnet._internal.tape import Tape
from pepsnet.exceptions import PepsArgumentError, PepsCapacityError
from pepsnet.types import DenseTensor, FeatureGrid


def _exact(grid: PepsGrid, features: FeatureGrid) -> np.ndarray:
    return exact_contract(absorbed(grid, features)).logits.true_values()


def _boundary(grid: PepsGrid, features: FeatureGrid, chi: int) -> np.ndarray:
    return bidirectional_contract(absorbed(grid, features), chi).logits.true_values()


def _rescaled(grid: PepsGrid, factor: float) -> PepsGrid:
    return grid.with_parameters({name: data * factor for name, data in grid.parameters().items()})


def _unit_logits(grid: PepsGrid, features: FeatureGrid) -> PepsGrid:
    """Rescale every site so the largest |logit| is about one."""
    peak = float(np.max(np.abs(_exact(grid, features))))
    return _rescaled(grid, peak ** (-1.0 / (grid.size * grid.size)))


def _random_mps(tape: Tape, rng: np.random.Generator, shapes: list[tuple[int, int, int]], chi: int) -> BoundaryMps:
    sites = tuple(tape.constant(DenseTensor(rng.normal(size=shape))) for shape in shapes)
    return BoundaryMps(tape, sites, chi)


class TestExactContract:
    def test_single_site_is_linear_classifier(self, rng):
        grid = random_grid(rng, 1, 2, 5, 3)
        features = random_features(rng, 1, 5)
        expected = grid.tensor(0, 0).data.T @ features.vectors[0, 0]
        np.testing.assert_allclose(_exact(grid, features), expected, rtol=1e-12)

    def test_bond_dimension_one_is_a_product(self, rng):
        grid = random_grid(rng, 2, 1, 3, 4)
        features = random_features(rng, 2, 3)
        np.testing.assert_allclose(_exact(grid, features), dense_oracle(grid, features), rtol=1e-12)

    @pytest.mark.parametrize(("size", "bond_dim"), [(2, 2), (3, 2), (3, 3), (4, 2)])
    def test_matches_einsum_oracle(self, rng, size, bond_dim):
        grid = random_grid(rng, size, bond_dim, 2, 4, low=-1.0, high=1.0)
        features = random_features(rng, size, 2)
        expected = dense_oracle(grid, features)
        np.testing.assert_allclose(_exact(grid, features), expected, rtol=1e-10, atol=1e-12 * np.abs(expected).max())

    def test_capacity_guard(self):
        size = 21
        center = (size // 2, size // 2)
        rows = []
        for i in range(size):
            rows.append(
                tuple(
                    DenseTensor(np.ones(site_shape(i, j, size, 2, 1, 1, center)), site_labels(i, j, size, center))
                    for j in range(size)
                )
            )
        grid = PepsGrid(tuple(rows), 2, 1, 1, center)
        with pytest.raises(PepsCapacityError):
            exact_contract(absorbed(grid, FeatureGrid(np.ones((size, size, 1)))))


class TestBidirectionalContract:
    @pytest.mark.parametrize(("size", "bond_dim"), [(2, 1), (2, 2), (3, 1), (3, 2), (4, 1), (4, 2)])
    def test_untruncated_equals_exact(self, size, bond_dim):
        rng = np.random.default_rng(100 * size + bond_dim)
        for _ in range(50):
            grid = random_grid(rng, size, bond_dim, 2, 3)
            features = random_features(rng, size, 2)
            exact = _exact(grid, features)
            approx = _boundary(grid, features, bond_dim**size)
            np.testing.assert_allclose(approx, exact, rtol=1e-10)

    def test_nonnegative_four_by_four(self, rng):
        grid = random_grid(rng, 4, 2, 2, 10)
        features = random_features(rng, 4, 2)
        np.testing.assert_allclose(_boundary(grid, features, 16), _exact(grid, features), rtol=1e-10)

    def test_signed_entries(self, rng):
        grid = random_grid(rng, 3, 2, 2, 4, low=-1.0, high=1.0)
        features = random_features(rng, 3, 2)
        exact = _exact(grid, features)
        np.testing.assert_allclose(_boundary(grid, features, 8), exact, rtol=1e-9, atol=1e-12 * np.abs(exact).max())

    def test_error_shrinks_with_chi(self):
        chis = (1, 2, 4, 8, 16)
        errors = {chi: [] for chi in chis}
        for seed in range(20):
            rng = np.random.default_rng(seed)
            grid = random_grid(rng, 4, 3, 2, 5)
            features = random_features(rng, 4, 2)
            exact = _exact(grid, features)
            for chi in chis:
                approx = _boundary(grid, features, chi)
                errors[chi].append(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
        means = [float(np.mean(errors[chi])) for chi in chis]
        for coarse, fine in zip(means, means[1:], strict=False):
            assert fine <= coarse + 1e-12
        assert means[-1] < 1e-10

    def test_truncation_reports_discarded_weight(self, rng):
        grid = random_grid(rng, 5, 3, 2, 2)
        features = random_features(rng, 5, 2)
        tape = Tape(grad_enabled=False)
        result = bidirectional_contract(absorbed(grid, features, tape), chi=3)
        assert np.all(np.isfinite(result.logits.values))
        assert len(result.discarded_weights) > 0
        assert max(result.discarded_weights) > 0.0

    def test_truncation_is_logged(self, rng, caplog):
        grid = random_grid(rng, 5, 3, 2, 2)
        features = random_features(rng, 5, 2)
        with caplog.at_level(logging.DEBUG, logger="pepsnet._internal.contraction"):
            bidirectional_contract(absorbed(grid, features, Tape(grad_enabled=False)), chi=3)
        assert "[Contraction] Boundary contraction chi=3" in caplog.text

    def test_scale_safety(self, rng):
        grid = random_grid(rng, 4, 2, 2, 10)
        features = random_features(rng, 4, 2)
        base = bidirectional_contract(absorbed(grid, features), 4).logits
        for factor in (1e3, 1e-3):
            scaled = bidirectional_contract(absorbed(_rescaled(grid, factor), features), 4).logits
            assert np.all(np.isfinite(scaled.values))
            np.testing.assert_allclose(scaled.values, base.values, rtol=1e-10)
            assert scaled.log_scale - base.log_scale == pytest.approx(16 * math.log(factor), rel=1e-10)
            assert scaled.argmax() == base.argmax()

    def test_needs_two_rows(self, rng):
        grid = random_grid(rng, 1, 2, 2, 3)
        with pytest.raises(PepsArgumentError):
            bidirectional_contract(absorbed(grid, random_features(rng, 1, 2)))

    def test_chi_must_be_positive(self, rng):
        grid = random_grid(rng, 2, 2, 2, 3)
        with pytest.raises(PepsArgumentError):
            bidirectional_contract(absorbed(grid, random_features(rng, 2, 2)), chi=0)


class TestBoundaryMps:
    def test_trivial_mps(self):
        mps = trivial_mps(Tape(), 3, 4)
        assert mps.length == 3
        np.testing.assert_array_equal(to_dense(mps), np.ones((1, 1, 1, 1, 1)))

    def test_canonical_form(self, rng):
        tape = Tape()
        mps = _random_mps(tape, rng, [(1, 2, 3), (3, 2, 3), (3, 2, 3), (3, 2, 1)], chi=8)
        canonical = canonicalize(mps, 2)
        np.testing.assert_allclose(to_dense(canonical), to_dense(mps), atol=1e-12)
        for k in range(2):
            left, phys, right = canonical.tensor(k).shape
            m = canonical.tensor(k).data.reshape(left * phys, right)
            np.testing.assert_allclose(m.T @ m, np.eye(right), atol=1e-12)
        left, phys, right = canonical.tensor(3).shape
        m = canonical.tensor(3).data.reshape(left, phys * right)
        np.testing.assert_allclose(m @ m.T, np.eye(left), atol=1e-12)

    def test_canonicalize_is_idempotent(self, rng):
        tape = Tape()
        mps = canonicalize(_random_mps(tape, rng, [(1, 2, 2), (2, 3, 2), (2, 2, 1)], chi=8), 1)
        again = canonicalize(mps, 1)
        for k in range(mps.length):
            np.testing.assert_allclose(again.tensor(k).data, mps.tensor(k).data, atol=1e-12)

    def test_identity_row_leaves_state_unchanged(self, rng):
        tape = Tape()
        mps = _random_mps(tape, rng, [(1, 2, 2), (2, 2, 2), (2, 2, 1)], chi=8)
        delta = np.eye(2).reshape(2, 1, 2, 1)
        row = [tape.constant(DenseTensor(delta)) for _ in range(3)]
        out = apply_row(mps, row)
        np.testing.assert_allclose(to_dense(out), to_dense(mps), rtol=1e-12, atol=1e-14)

    def _row(self, tape: Tape, rng: np.random.Generator, length: int, bond: int, phys: int) -> list[int]:
        row = []
        for k in range(length):
            east = bond if k < length - 1 else 1
            west = bond if k > 0 else 1
            row.append(tape.constant(DenseTensor(rng.uniform(size=(phys, east, phys, west)))))
        return row

    def test_large_chi_is_truncation_free(self, rng):
        tape = Tape()
        mps = _random_mps(tape, rng, [(1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 1)], chi=64)
        row = self._row(tape, rng, 4, 2, 2)
        out = apply_row(mps, row)
        assert all(w == pytest.approx(0.0, abs=1e-10) for w in out.discarded_weights)
        untruncated = _untruncated(tape, mps, row)
        np.testing.assert_allclose(to_dense(out), untruncated, rtol=1e-10, atol=1e-12 * np.abs(untruncated).max())

    def test_first_bond_discards_schmidt_tail(self, rng):
        tape = Tape()
        mps = _random_mps(tape, rng, [(1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 1)], chi=1)
        row = self._row(tape, rng, 4, 2, 2)
        truncated = apply_row(mps, row)
        vector = _untruncated(tape, mps, row)
        tail = np.linalg.svd(vector.reshape(2, -1), compute_uv=False)[1:]
        assert truncated.discarded_weights[0] == pytest.approx(float(np.sqrt(np.sum(tail**2))), rel=1e-8)
        assert truncated.bonds() == [1, 1, 1]

    def test_discarded_weight_shrinks_with_chi(self, rng):
        tape = Tape()
        shapes = [(1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 1)]
        sites = _random_mps(tape, rng, shapes, chi=1).sites
        row = self._row(tape, rng, 4, 2, 2)
        weights = [apply_row(BoundaryMps(tape, sites, chi), row).discarded_weights[0] for chi in (1, 2, 4)]
        assert weights[0] >= weights[1] >= weights[2]

    def test_row_length_mismatch(self, rng):
        tape = Tape()
        mps = _random_mps(tape, rng, [(1, 2, 1), (1, 2, 1)], chi=2)
        with pytest.raises(PepsArgumentError):
            apply_row(mps, self._row(tape, rng, 3, 1, 2))


def _untruncated(tape: Tape, mps: BoundaryMps, row: list[int]) -> np.ndarray:
    """Dense (1, s_0, ..., s_{L-1}, 1) vector of the MPS with ``row`` contracted in, without truncation."""
    grown = []
    for k, node in enumerate(row):
        site = mps.tensor(k).data  # (l, n, r)
        tensor = tape.tensor(node).data  # (n, e, s, w)
        merged = np.einsum("lnr,nesw->lwsre", site, tensor)
        left, west, south, right, east = merged.shape
        grown.append(merged.reshape(left * west, south, right * east))
    out = grown[0]
    for site in grown[1:]:
        out = np.tensordot(out, site, axes=(-1, 0))
    return out * math.exp(mps.log_scale)


class TestGradients:
    def _loss(self, grid: PepsGrid, features: FeatureGrid, label: int, chi: int, tape: Tape, checkpoint: bool) -> int:
        result = bidirectional_contract(absorbed(grid, features, tape), chi, checkpoint_rows=checkpoint)
        return ops.softmax_cross_entropy(tape, result.node, label, result.log_scale)

    @pytest.mark.parametrize("checkpoint", [False, True])
    def test_matches_finite_differences(self, rng, checkpoint):
        grid = random_grid(rng, 3, 2, 2, 3)
        features = random_features(rng, 3, 2)
        grid = _unit_logits(grid, features)

        tape = Tape()
        grads = tape.backward(self._loss(grid, features, 1, 4, tape, checkpoint)).named()

        for i, j in grid.sites():
            name = site_name(i, j)

            def fn(values, name=name):
                t = Tape(grad_enabled=False)
                return t.tensor(self._loss(grid.with_parameters({name: values}), features, 1, 4, t, False)).item()

            assert_gradients_close(grads[name], finite_difference(fn, grid.tensor(i, j).data))

    def test_checkpointing_keeps_gradients_and_saves_memory(self, rng):
        features = random_features(rng, 4, 2)
        grid = _unit_logits(random_grid(rng, 4, 2, 2, 3), features)
        plain_tape, wrapped_tape = Tape(), Tape()
        plain = plain_tape.backward(self._loss(grid, features, 2, 3, plain_tape, False)).named()
        wrapped = wrapped_tape.backward(self._loss(grid, features, 2, 3, wrapped_tape, True)).named()
        for name in plain:
            np.testing.assert_allclose(wrapped[name], plain[name], rtol=1e-12, atol=1e-14)
        assert wrapped_tape.retained_count() < plain_tape.retained_count()

    def test_logits_are_linear_in_each_site(self, rng):
        grid = random_grid(rng, 3, 2, 2, 4)
        features = random_features(rng, 3, 2)
        name = site_name(0, 1)
        a = rng.uniform(size=grid.tensor(0, 1).shape)
        b = rng.uniform(size=grid.tensor(0, 1).shape)
        f_a = _exact(grid.with_parameters({name: a}), features)
        f_b = _exact(grid.with_parameters({name: b}), features)
        combined = _exact(grid.with_parameters({name: 2.0 * a - 0.5 * b}), features)
        np.testing.assert_allclose(combined, 2.0 * f_a - 0.5 * f_b, rtol=1e-10, atol=1e-12 * np.abs(f_a).max())


class TestMultilinearity:
    @pytest.mark.parametrize("factor", [0.5, 2.0, 10.0])
    def test_scaling_one_feature_vector_scales_every_logit(self, factor):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            size = 2 + seed % 3
            grid = random_grid(rng, size, 2, 2, 4)
            features = random_features(rng, size, 2)
            i, j = (int(k) for k in rng.integers(0, size, size=2))
            vectors = features.vectors.copy()
            vectors[i, j] *= factor
            scaled = FeatureGrid(vectors)

            exact = _exact(grid, features)
            np.testing.assert_allclose(_exact(grid, scaled), factor * exact, rtol=1e-12)
            boundary = _boundary(grid, features, 2**size)
            scaled_boundary = _boundary(grid, scaled, 2**size)
            np.testing.assert_allclose(scaled_boundary, factor * boundary, rtol=1e-12)
            assert int(np.argmax(_exact(grid, scaled))) == int(np.argmax(exact))
            assert int(np.argmax(scaled_boundary)) == int(np.argmax(boundary))
