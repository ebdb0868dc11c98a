import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionseg.core import ShapeError, gradcheck
from regionseg.regions import RegionMask
from regionseg.roi_pooling import (NONE, ConvRegionMask, bbox_roi_pool_backward, bbox_roi_pool_forward,
                                   bin_edges, build_plan, freeform_roi_pool_backward, freeform_roi_pool_forward,
                                   pool_backward, pool_forward, rasterize_mask)

from .oracles import bins_exact, rasterize_brute, roi_pool_brute


def random_instance(rng, fh=8, fw=8, d=3):
    fm = rng.normal(size=(fh, fw, d))
    while True:
        x0, y0 = rng.integers(0, fw), rng.integers(0, fh)
        x1, y1 = rng.integers(x0, fw), rng.integers(y0, fh)
        inside = np.zeros((fh, fw), bool)
        inside[y0:y1 + 1, x0:x1 + 1] = rng.random((y1 - y0 + 1, x1 - x0 + 1)) < rng.uniform(0.2, 0.9)
        if inside.any():
            break
    ys, xs = np.nonzero(inside)
    # the box is the declared one, which may be larger than the mask's tight box
    mask = ConvRegionMask(np.flatnonzero(inside), (int(x0), int(y0), int(x1), int(y1)), (fh, fw))
    return fm, mask, inside


class TestRasterize:
    def test_full_image(self):
        r = RegionMask.from_box(0, 0, 15, 15, 16, 16)
        m = rasterize_mask(r, (16, 16), (8, 8))
        assert m.cells.size == 64 and m.bbox_fm == (0, 0, 7, 7)

    def test_one_block(self):
        r = RegionMask.from_box(4, 2, 5, 3, 16, 16)
        m = rasterize_mask(r, (16, 16), (8, 8))
        np.testing.assert_array_equal(m.cells, [1 * 8 + 2])

    def test_thin_diagonal_falls_back(self):
        img = np.eye(16, dtype=bool)
        m = rasterize_mask(RegionMask.from_mask(img), (16, 16), (4, 4))
        assert m.cells.size == 1
        np.testing.assert_array_equal(m.to_mask(), rasterize_brute(img, 4))

    def test_non_uniform_stride_rejected(self):
        with pytest.raises(ShapeError):
            rasterize_mask(RegionMask.from_box(0, 0, 1, 1, 16, 12), (12, 16), (6, 4))

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 31), st.sampled_from([1, 2, 4]))
    def test_matches_brute_force(self, seed, stride):
        rng = np.random.default_rng(seed)
        img = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        if not img.any():
            img[3, 5] = True
        m = rasterize_mask(RegionMask.from_mask(img), (16, 16), (16 // stride, 16 // stride))
        np.testing.assert_array_equal(m.to_mask(), rasterize_brute(img, stride))
        assert m.cells.size > 0
        x0, y0, x1, y1 = m.bbox_fm
        ys, xs = np.divmod(m.cells, 16 // stride)
        assert xs.min() >= x0 and xs.max() <= x1 and ys.min() >= y0 and ys.max() <= y1


class TestBins:
    @given(st.integers(0, 20), st.integers(0, 30), st.integers(1, 8))
    def test_floor_ceil_rule(self, start, length, n):
        end = start + length
        assert bin_edges(start, end, n, 10 ** 6) == bins_exact(start, end, n)

    @given(st.integers(1, 30), st.integers(1, 8))
    def test_bins_cover_box(self, length, n):
        spans = bin_edges(0, length - 1, n, 10 ** 6)
        covered = set()
        for lo, hi in spans:
            assert hi > lo
            covered.update(range(lo, hi))
        assert covered == set(range(length))


class TestFreeformForward:
    def test_two_cell_example(self):
        fm = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        mask = ConvRegionMask(np.array([0, 3]), (0, 0, 1, 1), (2, 2))
        roi = freeform_roi_pool_forward(fm, mask, (1, 1))
        assert roi.values[0, 0, 0] == 4.0 and roi.argmax[0, 0, 0] == 3

    def test_masked_max_ignores_larger_outside(self):
        fm = np.array([[1.0, 9.0], [3.0, 4.0]])[..., None]
        mask = ConvRegionMask(np.array([0, 2]), (0, 0, 1, 1), (2, 2))
        roi = freeform_roi_pool_forward(fm, mask, (1, 1))
        assert roi.values[0, 0, 0] == 3.0 and roi.argmax[0, 0, 0] == 2

    def test_identity_copy(self):
        rng = np.random.default_rng(0)
        fm = rng.normal(size=(6, 6, 2))
        mask = ConvRegionMask.full_box((1, 2, 3, 4), (6, 6))
        roi = freeform_roi_pool_forward(fm, mask, (3, 3))
        np.testing.assert_array_equal(roi.values, fm[2:5, 1:4])

    def test_empty_bin_zero_and_none(self):
        fm = np.arange(16.0).reshape(4, 4, 1) + 1
        mask = ConvRegionMask(np.array([0]), (0, 0, 3, 3), (4, 4))
        roi = freeform_roi_pool_forward(fm, mask, (2, 2))
        assert roi.values[0, 0, 0] == 1.0
        np.testing.assert_array_equal(roi.values.ravel()[1:], 0)
        np.testing.assert_array_equal(roi.argmax.ravel()[1:], NONE)

    def test_ties_go_to_lowest_index(self):
        fm = np.full((2, 2, 1), 5.0)
        roi = freeform_roi_pool_forward(fm, ConvRegionMask.full_box((0, 0, 1, 1), (2, 2)), (1, 1))
        assert roi.argmax[0, 0, 0] == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_brute_force_bins(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, inside = random_instance(rng)
        out = tuple(rng.integers(1, 5, size=2))
        roi = freeform_roi_pool_forward(fm, mask, out)
        vals, arg = roi_pool_brute(fm, inside, mask.bbox_fm, out)
        np.testing.assert_array_equal(roi.values, vals)
        np.testing.assert_array_equal(roi.argmax, arg)

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 31))
    def test_masking_property(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, inside = random_instance(rng)
        roi = freeform_roi_pool_forward(fm, mask, (3, 3))
        fm2 = fm.copy()
        fm2[~inside] += rng.normal(scale=100, size=fm2[~inside].shape)
        roi2 = freeform_roi_pool_forward(fm2, mask, (3, 3))
        assert roi.values.tobytes() == roi2.values.tobytes()
        np.testing.assert_array_equal(roi.argmax, roi2.argmax)

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 31))
    def test_value_read_at_argmax(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, inside = random_instance(rng)
        roi = freeform_roi_pool_forward(fm, mask, (3, 2))
        d = fm.shape[2]
        flat = fm.reshape(-1, d)
        hit = roi.argmax != NONE
        chan = np.broadcast_to(np.arange(d), roi.argmax.shape)
        np.testing.assert_array_equal(roi.values[hit], flat[roi.argmax[hit], chan[hit]])
        assert inside.ravel()[roi.argmax[hit]].all()


class TestBackward:
    def test_single_route(self):
        fm = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        roi = freeform_roi_pool_forward(fm, ConvRegionMask(np.array([0, 3]), (0, 0, 1, 1), (2, 2)), (1, 1))
        g = freeform_roi_pool_backward(roi, np.ones((1, 1, 1)))
        np.testing.assert_array_equal(g[..., 0], [[0, 0], [0, 1]])

    def test_shared_argmax_sums(self):
        fm = np.zeros((2, 2, 1))
        fm[0, 0] = 5.0
        # two 1x1 bins over rows 0..0 and 0..1 both select (0, 0)
        mask = ConvRegionMask(np.array([0, 2]), (0, 0, 0, 1), (2, 2))
        roi = freeform_roi_pool_forward(fm, mask, (1, 1))
        plan = build_plan([mask, mask], (1, 1), (2, 2))
        _, arg = pool_forward(fm, plan)
        g = pool_backward(np.array([1.0, 2.0]).reshape(2, 1, 1, 1), arg, fm.shape)
        assert g[0, 0, 0] == 3.0 and g.sum() == 3.0
        assert roi.argmax[0, 0, 0] == 0

    def test_shape_mismatch_rejected(self):
        fm = np.ones((2, 2, 1))
        roi = freeform_roi_pool_forward(fm, ConvRegionMask.full_box((0, 0, 1, 1), (2, 2)), (1, 1))
        with pytest.raises(ShapeError):
            freeform_roi_pool_backward(roi, np.ones((2, 2, 1)))
        with pytest.raises(ShapeError):
            freeform_roi_pool_backward(roi, np.ones((1, 1, 1)), (3, 3, 1))

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 31))
    def test_mass_conservation(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, _ = random_instance(rng)
        roi = freeform_roi_pool_forward(fm, mask, (3, 3))
        g = rng.normal(size=roi.values.shape)
        dfm = freeform_roi_pool_backward(roi, g)
        hit = roi.argmax != NONE
        for ch in range(fm.shape[2]):
            np.testing.assert_allclose(dfm[..., ch].sum(), g[..., ch][hit[..., ch]].sum(), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, _ = random_instance(rng)
        g = rng.normal(size=(3, 3, fm.shape[2]))

        def f(v):
            roi = freeform_roi_pool_forward(v, mask, (3, 3))
            return float((g * roi.values).sum()), freeform_roi_pool_backward(roi, g)

        res = gradcheck(f, fm, route=lambda v: freeform_roi_pool_forward(v, mask, (3, 3)).argmax)
        assert res.max_rel_error < 1e-6


class TestBoxPooling:
    @settings(max_examples=30)
    @given(st.integers(0, 2 ** 31))
    def test_equals_full_box_freeform(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, _ = random_instance(rng)
        a = bbox_roi_pool_forward(fm, mask.bbox_fm, (2, 3))
        b = freeform_roi_pool_forward(fm, ConvRegionMask.full_box(mask.bbox_fm, fm.shape[:2]), (2, 3))
        assert a.values.tobytes() == b.values.tobytes()
        np.testing.assert_array_equal(a.argmax, b.argmax)

    @settings(max_examples=30)
    @given(st.integers(0, 2 ** 31))
    def test_box_dominates_region(self, seed):
        rng = np.random.default_rng(seed)
        fm, mask, _ = random_instance(rng)
        fm = np.abs(fm)  # empty free-form bins emit 0, so compare non-negative maps
        a = bbox_roi_pool_forward(fm, mask.bbox_fm, (3, 3))
        b = freeform_roi_pool_forward(fm, mask, (3, 3))
        assert np.all(a.values >= b.values)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        fm = rng.normal(size=(6, 6, 2))
        g = rng.normal(size=(2, 2, 2))

        def f(v):
            roi = bbox_roi_pool_forward(v, (1, 1, 4, 5), (2, 2))
            return float((g * roi.values).sum()), bbox_roi_pool_backward(roi, g)

        assert gradcheck(f, fm).max_rel_error < 1e-6


class TestPlan:
    def test_batched_equals_single(self):
        rng = np.random.default_rng(3)
        fm = rng.normal(size=(8, 8, 4))
        masks = [random_instance(rng)[1] for _ in range(6)]
        vals, arg = pool_forward(fm, build_plan(masks, (3, 3), (8, 8)))
        for i, m in enumerate(masks):
            roi = freeform_roi_pool_forward(fm, m, (3, 3))
            np.testing.assert_array_equal(vals[i], roi.values)
            np.testing.assert_array_equal(arg[i], roi.argmax)

    def test_plan_rejects_wrong_map(self):
        plan = build_plan([ConvRegionMask.full_box((0, 0, 1, 1), (4, 4))], (1, 1), (4, 4))
        with pytest.raises(ShapeError):
            pool_forward(np.ones((5, 4, 1)), plan)
