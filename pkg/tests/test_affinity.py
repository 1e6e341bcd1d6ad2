import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afftrack import autodiff as ad
from afftrack.affinity import (
    AffinityMatrix,
    FeatureMap,
    LocationMap,
    canonical_grid,
    compute_affinity,
    gram_energy,
    topk_sparsify,
    trace_locations,
    transport,
)
from afftrack.autodiff import GradTape, Tensor, finite_difference_check
from afftrack.errors import DimensionError, ParameterError


def fmap(values, h, w):
    return FeatureMap(Tensor(np.asarray(values, dtype=np.float64)), h, w)


def random_fmap(c, h, w, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return fmap(rng.normal(scale=scale, size=(c, h * w)), h, w)


def permutation_affinity(perm, h, w):
    """Columns are one-hot: target j draws everything from source perm[j]."""
    n = len(perm)
    vals = np.zeros((n, n))
    vals[perm, np.arange(n)] = 1.0
    return AffinityMatrix(Tensor(vals), (h, w), (h, w))


class TestFeatureMap:
    def test_geometry_round_trip(self):
        f = random_fmap(3, 2, 4, 0)
        again = FeatureMap.from_grid(f.grid())
        np.testing.assert_array_equal(again.values.data, f.values.data)
        assert (again.h, again.w) == (2, 4)

    def test_size_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            fmap(np.ones((2, 5)), 2, 3)


class TestComputeAffinity:
    def test_constant_features_give_uniform_columns(self):
        f1 = fmap(np.ones((4, 6)), 2, 3)
        f2 = random_fmap(4, 2, 3, 1)
        a = compute_affinity(f1, f2)
        np.testing.assert_allclose(a.values.data, np.full((6, 6), 1 / 6))

    def test_scaled_one_hot_peaks(self):
        f1 = fmap(10.0 * np.eye(2), 1, 2)
        f2 = fmap(10.0 * np.array([[1.0], [0.0]]), 1, 1)
        a = compute_affinity(f1, f2)
        assert a.values.data[0, 0] == pytest.approx(1.0, abs=1e-40)
        assert a.values.data[1, 0] == pytest.approx(3.720075976020836e-44, rel=1e-12)

    def test_temperature_matches_feature_rescaling(self):
        f1 = random_fmap(3, 2, 2, 2)
        f2 = random_fmap(3, 2, 2, 3)
        hot = compute_affinity(f1, f2, temperature=2.0)
        s = 1.0 / np.sqrt(2.0)
        cool = compute_affinity(fmap(f1.values.data * s, 2, 2),
                                fmap(f2.values.data * s, 2, 2), 1.0)
        np.testing.assert_allclose(hot.values.data, cool.values.data, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            compute_affinity(random_fmap(3, 2, 2, 0), random_fmap(4, 2, 2, 1))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_column_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        f1 = fmap(rng.normal(scale=3, size=(4, 9)), 3, 3)
        f2 = fmap(rng.normal(scale=3, size=(4, 6)), 2, 3)
        a = compute_affinity(f1, f2)
        np.testing.assert_allclose(a.values.data.sum(axis=0), np.ones(6),
                                   atol=1e-6)
        assert (a.values.data >= 0).all()

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_sharpening_reduces_entropy(self, seed):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(4, 8))
        f2v = rng.normal(size=(4, 8))
        a1 = compute_affinity(fmap(base, 2, 4), fmap(f2v, 2, 4)).values.data
        s = 1.7
        a2 = compute_affinity(fmap(base * s, 2, 4), fmap(f2v * s, 2, 4)).values.data

        def entropy(cols):
            p = np.clip(cols, 1e-300, None)
            return -(p * np.log(p)).sum(axis=0)

        h1, h2 = entropy(a1), entropy(a2)
        # constant columns keep maximal entropy; random features avoid that
        assert (h2 < h1 + 1e-12).all() and (h2 < h1 - 1e-12).any()


class TestTransport:
    def test_identity(self):
        c = np.arange(8.0).reshape(2, 4)
        a = permutation_affinity(np.arange(4), 2, 2)
        np.testing.assert_array_equal(transport(Tensor(c), a).data, c)

    def test_permutation(self):
        perm = np.array([2, 0, 3, 1])
        a = permutation_affinity(perm, 2, 2)
        c = np.arange(8.0).reshape(2, 4)
        out = transport(Tensor(c), a)
        np.testing.assert_array_equal(out.data, c[:, perm])

    def test_uniform_average(self):
        n = 5
        a = AffinityMatrix(Tensor(np.full((n, n), 1 / n)), (1, n), (1, n))
        c = np.random.default_rng(0).normal(size=(3, n))
        out = transport(Tensor(c), a)
        np.testing.assert_allclose(out.data,
                                   np.repeat(c.mean(axis=1, keepdims=True), n, 1))

    def test_dimension_error(self):
        a = permutation_affinity(np.arange(4), 2, 2)
        with pytest.raises(DimensionError):
            transport(Tensor(np.ones((2, 5))), a)


class TestTraceLocations:
    def test_identity_gives_canonical_grid(self):
        grid = canonical_grid(2, 3)
        a = permutation_affinity(np.arange(6), 2, 3)
        out = trace_locations(grid, a)
        np.testing.assert_array_equal(out.coords.data, grid.coords.data)

    def test_uniform_gives_centroid(self):
        grid = canonical_grid(3, 3)
        a = AffinityMatrix(Tensor(np.full((9, 9), 1 / 9)), (3, 3), (3, 3))
        out = trace_locations(grid, a)
        np.testing.assert_allclose(out.coords.data, np.ones((2, 9)))

    def test_permutation_reindexes(self):
        perm = np.array([3, 1, 0, 2])
        grid = canonical_grid(2, 2)
        a = permutation_affinity(perm, 2, 2)
        out = trace_locations(grid, a)
        np.testing.assert_array_equal(out.coords.data, grid.coords.data[:, perm])

    def test_convex_hull_containment(self):
        rng = np.random.default_rng(7)
        f1 = fmap(rng.normal(size=(4, 12)), 3, 4)
        f2 = fmap(rng.normal(size=(4, 12)), 3, 4)
        out = trace_locations(canonical_grid(3, 4), compute_affinity(f1, f2))
        assert out.coords.data[0].min() >= 0 and out.coords.data[0].max() <= 3
        assert out.coords.data[1].min() >= 0 and out.coords.data[1].max() <= 2


class TestTopkSparsify:
    def test_full_k_is_identity(self):
        a = compute_affinity(random_fmap(3, 2, 3, 0), random_fmap(3, 2, 3, 1))
        out = topk_sparsify(a, 6)
        np.testing.assert_allclose(out.values.data, a.values.data, atol=1e-12)

    def test_k1_argmax(self):
        vals = np.array([[0.5], [0.3], [0.2]])
        a = AffinityMatrix(Tensor(vals), (1, 3), (1, 1))
        out = topk_sparsify(a, 1)
        np.testing.assert_allclose(out.values.data, [[1.0], [0.0], [0.0]])

    def test_k2_renormalizes(self):
        vals = np.array([[0.5], [0.3], [0.2]])
        a = AffinityMatrix(Tensor(vals), (1, 3), (1, 1))
        out = topk_sparsify(a, 2)
        np.testing.assert_allclose(out.values.data, [[0.625], [0.375], [0.0]])

    def test_tie_prefers_lower_row(self):
        vals = np.array([[0.4], [0.4], [0.2]])
        out = topk_sparsify(AffinityMatrix(Tensor(vals), (1, 3), (1, 1)), 1)
        np.testing.assert_allclose(out.values.data, [[1.0], [0.0], [0.0]])

    def test_k_out_of_range(self):
        a = permutation_affinity(np.arange(4), 2, 2)
        for bad in (0, 5):
            with pytest.raises(ParameterError):
                topk_sparsify(a, bad)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_sparsified_columns_still_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        f1 = fmap(rng.normal(scale=2, size=(4, 16)), 4, 4)
        f2 = fmap(rng.normal(scale=2, size=(4, 16)), 4, 4)
        out = topk_sparsify(compute_affinity(f1, f2), 5)
        np.testing.assert_allclose(out.values.data.sum(axis=0), np.ones(16),
                                   atol=1e-6)
        assert (np.count_nonzero(out.values.data, axis=0) <= 5).all()


class TestGramEnergy:
    def test_orthonormal_rows(self):
        f = fmap(np.eye(3, 4), 2, 2)
        np.testing.assert_allclose(gram_energy(f).data, np.eye(3))

    def test_zero_features(self):
        f = fmap(np.zeros((3, 4)), 2, 2)
        np.testing.assert_array_equal(gram_energy(f).data, np.zeros((3, 3)))

    def test_preserved_under_permutation_transport(self):
        f = random_fmap(3, 2, 2, 11)
        perm = np.array([1, 3, 0, 2])
        a = permutation_affinity(perm, 2, 2)
        moved = FeatureMap(transport(f.values, a), 2, 2)
        np.testing.assert_allclose(gram_energy(moved).data,
                                   gram_energy(f).data, atol=1e-12)


class TestEndToEndGradients:
    def test_transport_through_affinity(self):
        rng = np.random.default_rng(3)
        c = rng.normal(size=(2, 6))
        w = rng.normal(size=(2, 6))
        f2v = rng.normal(size=(3, 6))

        def fn(t):
            f1 = FeatureMap(ad.reshape(t, (3, 6)), 2, 3)
            a = compute_affinity(f1, fmap(f2v, 2, 3))
            return ad.tsum(ad.multiply(transport(Tensor(c), a), Tensor(w)))

        err = finite_difference_check(fn, Tensor(rng.normal(size=18)), 1e-6)
        assert err < 1e-4

    def test_trace_through_affinity(self):
        rng = np.random.default_rng(4)
        f1v = rng.normal(size=(3, 6))
        w = rng.normal(size=(2, 6))

        def fn(t):
            f2 = FeatureMap(ad.reshape(t, (3, 6)), 2, 3)
            a = compute_affinity(fmap(f1v, 2, 3), f2)
            traced = trace_locations(canonical_grid(2, 3), a)
            return ad.tsum(ad.multiply(traced.coords, Tensor(w)))

        err = finite_difference_check(fn, Tensor(rng.normal(size=18)), 1e-6)
        assert err < 1e-4
