import numpy as np
import pytest

from afftrack import autodiff as ad
from afftrack.affinity import FeatureMap, LocationMap, canonical_grid
from afftrack.autodiff import GradTape, Tensor, finite_difference_check
from afftrack.errors import LocalizationError, NumericError, ParameterError
from afftrack.localization import (
    BBox,
    LocalizeConfig,
    bilinear_sample,
    clamp_half_extents,
    estimate_scale,
    locate_center,
    localize_patch,
    mean_shift_refine,
    roi_crop,
)


def lmap(points, h=1, w=None):
    pts = np.asarray(points, dtype=np.float64).T
    w = w if w is not None else pts.shape[1] // h
    return LocationMap(Tensor(pts), h, w)


class TestLocateCenter:
    def test_single_point(self):
        c = locate_center(lmap([(3.0, 4.0)]))
        np.testing.assert_allclose(c.data, [3.0, 4.0])

    def test_symmetric_square(self):
        pts = [(1, 1), (3, 1), (1, 3), (3, 3)]
        np.testing.assert_allclose(locate_center(lmap(pts, 1, 4)).data, [2, 2])

    def test_three_points(self):
        pts = [(0, 0), (1, 0), (2, 3)]
        np.testing.assert_allclose(locate_center(lmap(pts, 1, 3)).data, [1, 1])


class TestEstimateScale:
    def test_four_point_example(self):
        pts = [(-1.5, 0), (-0.5, 0), (0.5, 0), (1.5, 0)]
        w, h = estimate_scale(lmap(pts, 1, 4), Tensor([0.0, 0.0]))
        assert float(w.data) == pytest.approx(2.0)

    def test_degenerate_spread_clamps(self):
        pts = [(2.0, 2.0)] * 4
        w, h = estimate_scale(lmap(pts, 1, 4), Tensor([2.0, 2.0]))
        assert float(w.data) == 0.0 and float(h.data) == 0.0
        wc, hc = clamp_half_extents(w, h, (16, 16), min_half=2.0)
        assert float(wc.data) == 2.0 and float(hc.data) == 2.0

    @pytest.mark.parametrize("half", [2.0, 4.0, 8.0])
    def test_uniform_sampling_recovers_half_width(self, half):
        # cell-centered samples of [-half, half]: the estimate matches the
        # continuous-integral value exactly for even N
        n = 16
        xs = -half + (np.arange(n) + 0.5) * (2 * half / n)
        pts = np.stack(np.meshgrid(xs, xs), axis=-1).reshape(-1, 2)
        w, h = estimate_scale(lmap(pts, n, n), Tensor([0.0, 0.0]))
        assert abs(float(w.data) - half) / half < 0.05
        assert abs(float(h.data) - half) / half < 0.05

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(8, 2))
        base = estimate_scale(lmap(pts, 2, 4), Tensor(pts.mean(axis=0)))
        shifted = estimate_scale(lmap(pts + 5.5, 2, 4),
                                 Tensor(pts.mean(axis=0) + 5.5))
        assert float(base[0].data) == pytest.approx(float(shifted[0].data))
        assert float(base[1].data) == pytest.approx(float(shifted[1].data))

    def test_scale_equivariance(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(8, 2))
        center = pts.mean(axis=0)
        w1, _ = estimate_scale(lmap(pts, 2, 4), Tensor(center))
        w3, _ = estimate_scale(lmap(center + 3 * (pts - center), 2, 4),
                               Tensor(center))
        assert float(w3.data) == pytest.approx(3 * float(w1.data))


class TestBilinearSample:
    def test_exact_on_linear_ramp(self):
        h, w = 5, 6
        ramp = (np.arange(w)[None, :] + 2.0 * np.arange(h)[:, None])[None]
        xs = np.array([0.5, 2.25, 4.75])
        ys = np.array([0.5, 1.5, 3.25])
        out = bilinear_sample(Tensor(ramp), Tensor(xs), Tensor(ys))
        np.testing.assert_allclose(out.data[0], xs + 2 * ys)

    def test_edge_clamp(self):
        grid = Tensor(np.arange(4.0).reshape(1, 2, 2))
        out = bilinear_sample(grid, Tensor([-3.0, 5.0]), Tensor([0.0, 1.0]))
        np.testing.assert_allclose(out.data[0], [0.0, 3.0])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(2, 4))

        def fn_coords(t):
            out = bilinear_sample(Tensor(grid), t[:4], t[4:])
            return ad.tsum(ad.multiply(out, Tensor(w)))

        point = Tensor(np.concatenate([rng.uniform(0.3, 3.7, 4),
                                       rng.uniform(0.3, 3.7, 4)]))
        assert finite_difference_check(fn_coords, point, 1e-6) < 1e-4

        xs, ys = rng.uniform(0.3, 3.7, 4), rng.uniform(0.3, 3.7, 4)

        def fn_grid(t):
            out = bilinear_sample(ad.reshape(t, (2, 5, 5)), Tensor(xs), Tensor(ys))
            return ad.tsum(ad.multiply(out, Tensor(w)))

        assert finite_difference_check(fn_grid, Tensor(grid.reshape(-1)), 1e-6) < 1e-4


class TestRoiCrop:
    def test_integer_aligned_exact_copy(self):
        rng = np.random.default_rng(3)
        f = FeatureMap(Tensor(rng.normal(size=(3, 36))), 6, 6)
        box = BBox.from_floats(cx=3.0, cy=2.5, w=1.0, h=1.5)  # cells 2..4 x 1..4
        out = roi_crop(f, box, out_h=4, out_w=3)
        expect = f.grid().data[:, 1:5, 2:5]
        np.testing.assert_allclose(out.grid().data, expect, atol=1e-12)

    def test_half_cell_shift_on_ramp(self):
        ramp = np.tile(np.arange(8.0), (8, 1))[None]
        f = FeatureMap(Tensor(ramp.reshape(1, 64)), 8, 8)
        box = BBox.from_floats(cx=4.0, cy=3.5, w=1.5, h=1.5)
        shifted = roi_crop(f, box, 4, 4)
        box2 = BBox.from_floats(cx=4.5, cy=3.5, w=1.5, h=1.5)
        shifted2 = roi_crop(f, box2, 4, 4)
        np.testing.assert_allclose(shifted2.values.data - shifted.values.data,
                                   np.full((1, 16), 0.5), atol=1e-12)

    def test_full_frame_identity(self):
        rng = np.random.default_rng(4)
        f = FeatureMap(Tensor(rng.normal(size=(2, 25))), 5, 5)
        box = BBox.from_floats(cx=2.0, cy=2.0, w=2.0, h=2.0)
        out = roi_crop(f, box, 5, 5)
        np.testing.assert_allclose(out.values.data, f.values.data, atol=1e-12)

    def test_no_overlap_raises(self):
        f = FeatureMap(Tensor(np.zeros((1, 25))), 5, 5)
        with pytest.raises(LocalizationError):
            roi_crop(f, BBox.from_floats(cx=40.0, cy=2.0, w=1.0, h=1.0), 2, 2)

    def test_gradient_wrt_box_params(self):
        rng = np.random.default_rng(5)
        grid = rng.normal(size=(2, 8, 8))
        f = FeatureMap(Tensor(grid.reshape(2, 64)), 8, 8)
        w = rng.normal(size=(2, 9))

        def fn(t):
            box = BBox(t[0], t[1], t[2], t[3])
            out = roi_crop(f, box, 3, 3)
            return ad.tsum(ad.multiply(out.values, Tensor(w)))

        # params chosen so no lattice sample sits on an integer coordinate,
        # where bilinear interpolation kinks and central differences straddle
        point = Tensor([3.31, 4.13, 1.72, 2.21])
        assert finite_difference_check(fn, point, 1e-6) < 1e-4


class TestMeanShift:
    def test_single_point(self):
        out = mean_shift_refine(lmap([(2.0, 5.0)]), (0.0, 0.0), bandwidth=1.0)
        np.testing.assert_allclose(out, [2.0, 5.0])

    def test_symmetric_cluster_fixed_point(self):
        pts = [(1, 1), (3, 1), (1, 3), (3, 3)]
        out = mean_shift_refine(lmap(pts, 1, 4), (2.0, 2.0), bandwidth=1.5)
        np.testing.assert_allclose(out, [2.0, 2.0])

    def test_outlier_rejection(self):
        # tight cluster: the kernel-weighted fixpoint coincides with the
        # centroid to well below the tolerance
        rng = np.random.default_rng(6)
        cluster = rng.normal(scale=0.05, size=(9, 2))
        pts = np.vstack([cluster, [(10.0, 10.0)]])
        init = pts.mean(axis=0)
        out, path = mean_shift_refine(lmap(pts, 1, 10), init, bandwidth=1.0,
                                      max_iters=50, tol=1e-6, return_path=True)
        assert np.linalg.norm(out - cluster.mean(axis=0)) < 1e-3
        assert len(path) <= 51

    def test_ascent_property_random_sets(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            pts = rng.normal(scale=rng.uniform(0.5, 3), size=(12, 2))
            init = pts[rng.integers(len(pts))] + rng.normal(scale=0.5, size=2)
            # internal per-iteration check raises on any density decrease
            mean_shift_refine(lmap(pts, 2, 6), init,
                              bandwidth=rng.uniform(0.5, 2.0), max_iters=40)

    def test_underflow_falls_back_to_mean(self):
        pts = [(0.0, 0.0), (2.0, 0.0)]
        out = mean_shift_refine(lmap(pts, 1, 2), (1e6, 1e6), bandwidth=0.5)
        np.testing.assert_allclose(out, [1.0, 0.0])

    def test_bad_bandwidth(self):
        with pytest.raises(ParameterError):
            mean_shift_refine(lmap([(0.0, 0.0)]), (0.0, 0.0), bandwidth=0.0)


def planted_patch_scene(seed, offset=(3, 2), ph=3, pw=3, fh=8, fw=8, scale=6.0):
    """Distinct per-cell features; the frame contains the patch at offset."""
    rng = np.random.default_rng(seed)
    c = ph * pw + fh * fw
    frame = rng.normal(size=(c, fh, fw))
    frame = scale * frame / np.linalg.norm(frame, axis=0, keepdims=True)
    patch = frame[:, offset[1]:offset[1] + ph, offset[0]:offset[0] + pw]
    p1 = FeatureMap(Tensor(patch.reshape(c, ph * pw)), ph, pw)
    f2 = FeatureMap(Tensor(frame.reshape(c, fh * fw)), fh, fw)
    return p1, f2


class TestLocalizePatch:
    def test_planted_patch_center(self):
        offset = (3, 2)
        p1, f2 = planted_patch_scene(0, offset)
        result = localize_patch(p1, f2, LocalizeConfig(min_half_extent=0.5))
        true_cx = offset[0] + 1.0  # 3x3 patch center
        true_cy = offset[1] + 1.0
        cx, cy, _, _ = result.bbox.as_tuple()
        assert abs(cx - true_cx) < 0.5 and abs(cy - true_cy) < 0.5

    def test_self_match_recovers_own_box(self):
        rng = np.random.default_rng(1)
        c = 32
        frame = 6.0 * rng.normal(size=(c, 36))
        frame /= np.linalg.norm(frame, axis=0, keepdims=True) / 6.0
        f = FeatureMap(Tensor(frame), 6, 6)
        result = localize_patch(f, f, LocalizeConfig())
        cx, cy, w, h = result.bbox.as_tuple()
        assert abs(cx - 2.5) < 0.3 and abs(cy - 2.5) < 0.3

    def test_scaled_copy_doubles_width(self):
        rng = np.random.default_rng(2)
        ph = pw = 4
        c = 64
        patch = rng.normal(size=(c, ph, pw))
        patch = 6.0 * patch / np.linalg.norm(patch, axis=0, keepdims=True)
        # nearest-neighbor x2 upsample planted in a larger frame
        big = np.repeat(np.repeat(patch, 2, axis=1), 2, axis=2)
        frame = rng.normal(size=(c, 12, 12))
        frame = 6.0 * frame / np.linalg.norm(frame, axis=0, keepdims=True)
        frame[:, 2:10, 1:9] = big
        p1 = FeatureMap(Tensor(patch.reshape(c, ph * pw)), ph, pw)
        f2 = FeatureMap(Tensor(frame.reshape(c, 144)), 12, 12)
        result = localize_patch(p1, f2, LocalizeConfig(min_half_extent=0.5))
        _, _, w, _ = result.bbox.as_tuple()
        w_self, _ = estimate_scale(
            trace_self(p1), locate_center(trace_self(p1)))
        assert abs(w - 2.0 * float(w_self.data)) / (2.0 * float(w_self.data)) < 0.15

    def test_center_gradient_through_chain(self):
        rng = np.random.default_rng(3)
        f2v = rng.normal(size=(4, 16))

        def fn(t):
            p1 = FeatureMap(ad.reshape(t, (4, 4)), 2, 2)
            result = localize_patch(p1, FeatureMap(Tensor(f2v), 4, 4),
                                    LocalizeConfig(min_half_extent=0.1))
            return ad.add(result.bbox.cx, ad.multiply(result.bbox.cy, Tensor(0.5)))

        assert finite_difference_check(fn, Tensor(rng.normal(size=16)), 1e-6) < 1e-4

    def test_scale_gradient_through_chain(self):
        rng = np.random.default_rng(4)
        f2v = rng.normal(size=(4, 16))

        def fn(t):
            p1 = FeatureMap(ad.reshape(t, (4, 4)), 2, 2)
            result = localize_patch(p1, FeatureMap(Tensor(f2v), 4, 4),
                                    LocalizeConfig(min_half_extent=0.1))
            return ad.add(result.bbox.w, result.bbox.h)

        assert finite_difference_check(fn, Tensor(rng.normal(size=16)), 1e-6) < 1e-4


def trace_self(p: FeatureMap):
    """Traced map of a patch matched against itself (near-identity)."""
    from afftrack.localization import localize_patch as lp

    return lp(p, p, LocalizeConfig(min_half_extent=0.1)).traced
