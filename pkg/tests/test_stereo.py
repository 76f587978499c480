import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volcap.camera import Camera, Intrinsics, Pose, look_at
from volcap.depthfilter import DepthMap, GuidanceImage
from volcap.errors import InvalidInputError
from volcap.stereo import (
    DisparityMap,
    RectifiedPair,
    compute_pair_overlap,
    depth_to_disparity,
    disparity_to_depth,
    estimate_disparity_blockmatch,
    flip_disparity,
    flip_image,
    gate_pair,
    negate_disparity,
    should_apply_flip_patch,
    stereo_depth_for_pair,
)

from oracles import pair_overlap_monte_carlo


def _textured(rng, h=40, w=64):
    return GuidanceImage(rng.random((h, w, 3)))


def _shifted_pair(rng, shift, h=40, w=64):
    """second(u) = first(u + shift): content moved left by `shift` px."""
    base = rng.random((h, w + abs(shift), 3))
    first = base[:, : w] if shift >= 0 else base[:, -w:]
    second = base[:, shift : shift + w] if shift >= 0 else base[:, : w]
    return GuidanceImage(first), GuidanceImage(second)


class TestDisparityToDepth:
    def test_direct_formula(self):
        d = DisparityMap(np.full((4, 4), 180.0), np.ones((4, 4), dtype=bool))
        z = disparity_to_depth(d, 600.0, 0.9)
        assert np.allclose(z.values, 3.0)

    def test_zero_disparity_invalid(self):
        d = DisparityMap(np.zeros((2, 2)), np.ones((2, 2), dtype=bool))
        z = disparity_to_depth(d, 600.0, 0.9)
        assert not z.valid.any()

    def test_below_floor_invalid(self):
        d = DisparityMap(np.full((2, 2), 0.4), np.ones((2, 2), dtype=bool))
        assert not disparity_to_depth(d, 600.0, 0.9).valid.any()

    def test_elementwise_oracle(self, rng):
        vals = rng.uniform(1.0, 200.0, (16, 16))
        d = DisparityMap(vals, np.ones((16, 16), dtype=bool))
        z = disparity_to_depth(d, 612.0, 0.85)
        expected = 612.0 * 0.85 / vals
        rel = np.abs(z.values - expected) / expected
        assert rel.max() < 1e-9

    def test_round_trip_with_inverse(self, rng):
        vals = rng.uniform(0.6, 100.0, (8, 8))
        d = DisparityMap(vals, np.ones((8, 8), dtype=bool))
        z = disparity_to_depth(d, 600.0, 0.9)
        d2 = depth_to_disparity(z, 600.0, 0.9)
        rel = np.abs(d2.values - vals) / vals
        assert rel.max() < 1e-9


class TestFlipDisparity:
    def test_constant_field_negated(self):
        d = DisparityMap(np.full((3, 5), 5.0), np.ones((3, 5), dtype=bool))
        out = flip_disparity(d)
        assert np.allclose(out.values, -5.0)

    def test_involution_exact(self, rng):
        vals = rng.normal(size=(7, 9))
        valid = rng.random((7, 9)) < 0.8
        d = DisparityMap(np.where(valid, vals, 0.0), valid)
        dd = flip_disparity(flip_disparity(d))
        assert np.array_equal(dd.values, d.values)
        assert np.array_equal(dd.valid, d.valid)

    def test_index_by_index_oracle(self, rng):
        vals = rng.normal(size=(6, 11))
        d = DisparityMap(vals, np.ones((6, 11), dtype=bool))
        out = flip_disparity(d)
        for v in range(6):
            for u in range(11):
                assert out.values[v, u] == -vals[v, 10 - u]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31 - 1))
    def test_involution_property(self, h, w, seed):
        r = np.random.default_rng(seed)
        valid = r.random((h, w)) < 0.7
        d = DisparityMap(np.where(valid, r.normal(size=(h, w)), 0.0), valid)
        dd = flip_disparity(flip_disparity(d))
        assert np.array_equal(dd.values, d.values) and np.array_equal(dd.valid, d.valid)


class TestFlipPatchTrigger:
    def test_first_left_of_second(self):
        m1 = np.zeros((10, 400), dtype=bool)
        m2 = np.zeros((10, 400), dtype=bool)
        m1[:, 95:105] = True
        m2[:, 295:305] = True
        assert should_apply_flip_patch(m1, m2) is True
        assert should_apply_flip_patch(m2, m1) is False

    def test_equal_medians_no_flip(self):
        m = np.zeros((5, 100), dtype=bool)
        m[:, 40:60] = True
        assert should_apply_flip_patch(m, m.copy()) is False

    def test_empty_mask_indeterminate(self):
        m = np.ones((5, 10), dtype=bool)
        empty = np.zeros((5, 10), dtype=bool)
        assert should_apply_flip_patch(m, empty) is None
        assert should_apply_flip_patch(empty, m) is None


class TestBlockMatcher:
    def test_known_shift(self, rng):
        first, second = _shifted_pair(rng, 7)
        pair = RectifiedPair(first, second, 600.0, 0.9)
        d = estimate_disparity_blockmatch(pair, window=5, d_max=12)
        interior = d.valid[4:-4, 16:-16]
        assert interior.mean() > 0.9
        assert np.all(d.values[4:-4, 16:-16][interior] == 7.0)

    def test_identical_images_zero(self, rng):
        img = _textured(rng)
        pair = RectifiedPair(img, img, 600.0, 0.9)
        d = estimate_disparity_blockmatch(pair, window=5, d_max=8)
        assert d.valid[4:-4, 12:-12].mean() > 0.9
        assert np.all(d.values[d.valid] == 0.0)

    def test_flipping_identity_exact(self, rng):
        # flip_disparity is mirror-and-negate, i.e. the -flip(d) transform.
        for _ in range(5):
            shift = int(rng.integers(2, 9))
            first, second = _shifted_pair(rng, shift, h=24, w=48)
            pair = RectifiedPair(first, second, 600.0, 0.9)
            d_fwd = estimate_disparity_blockmatch(pair, window=5, d_max=10)
            pair_f = RectifiedPair(flip_image(first), flip_image(second), 600.0, 0.9)
            d_flip = estimate_disparity_blockmatch(pair_f, window=5, d_max=10)
            lhs = flip_disparity(d_fwd)
            assert np.array_equal(lhs.valid, d_flip.valid)
            assert np.array_equal(lhs.values, d_flip.values)

    def test_textureless_rejected(self):
        flat = GuidanceImage(np.full((20, 40, 3), 0.5))
        pair = RectifiedPair(flat, flat, 600.0, 0.9)
        d = estimate_disparity_blockmatch(pair, window=5, d_max=6)
        assert not d.valid.any()

    def test_even_window_rejected(self, rng):
        img = _textured(rng)
        with pytest.raises(InvalidInputError):
            estimate_disparity_blockmatch(RectifiedPair(img, img, 600.0, 0.9), window=4, d_max=8)


class TestStereoDepthForPair:
    def _masks(self, h, w, x0, x1):
        m = np.zeros((h, w), dtype=bool)
        m[:, x0:x1] = True
        return m

    def test_produces_depth_at_expected_range(self, rng):
        shift = 8
        first, second = _shifted_pair(rng, shift, h=32, w=64)
        mask = self._masks(32, 64, 8, 56)
        depth = stereo_depth_for_pair(first, second, mask, mask, 600.0, 0.9, d_max=12)
        assert depth is not None
        vals = depth.values[depth.valid]
        assert vals.size > 100
        assert np.allclose(vals, 600.0 * 0.9 / shift, rtol=1e-9)

    def test_flip_patch_recovers_reversed_pair(self, rng):
        shift = 6
        first, second = _shifted_pair(rng, shift, h=32, w=64)
        # Reversed ordering: feed (second, first).  Foreground medians must
        # reflect the reversal, so offset the masks accordingly.
        m_first = self._masks(32, 64, 6, 30)
        m_second = self._masks(32, 64, 12, 36)
        depth = stereo_depth_for_pair(second, first, m_first, m_second, 600.0, 0.9, d_max=12)
        assert depth is not None
        vals = depth.values[depth.valid]
        assert vals.size > 50
        assert np.allclose(vals, 600.0 * 0.9 / shift, rtol=1e-9)

    def test_empty_mask_skips(self, rng):
        first, second = _shifted_pair(rng, 5)
        empty = np.zeros((40, 64), dtype=bool)
        full = np.ones((40, 64), dtype=bool)
        assert stereo_depth_for_pair(first, second, empty, full, 600.0, 0.9) is None


class TestGatePair:
    def _cam(self, eye, target=(0, 0, 0)):
        return Camera("c", Intrinsics(80.0, 80.0, 39.5, 29.5, 80, 60), look_at(eye, target))

    def test_identical_cameras_full_overlap(self):
        a = self._cam([0.0, 0.0, -2.5])
        assert compute_pair_overlap(a, a) == 1.0
        assert gate_pair(a, a)

    def test_opposite_facing_no_overlap(self):
        a = self._cam([0.0, 0.0, -2.5], target=(0, 0, 0))
        b = self._cam([0.0, 0.0, -2.5], target=(0, 0, -5.0))
        assert compute_pair_overlap(a, b) == 0.0
        assert not gate_pair(a, b)

    def test_arc_pair_matches_monte_carlo(self):
        ang = np.deg2rad(30.0)
        a = self._cam([0.0, 0.0, -2.5])
        b = self._cam([2.5 * np.sin(ang), 0.0, -2.5 * np.cos(ang)])
        grid = compute_pair_overlap(a, b)
        mc = pair_overlap_monte_carlo(a, b, 0.5, 3.5, 20000, seed=99)
        assert abs(grid - mc) <= 0.05


def test_rig_of_gated_cameras_yields_two_views_per_pair():
    from volcap.synthetic import make_arc_rig

    rig = make_arc_rig(6, width=80, height=64)
    pairs = list(zip(rig[:-1], rig[1:]))
    assert all(gate_pair(a, b) for a, b in pairs)
    # each adjacent pair contributes a depth map per ordered direction
    directions = [(a.id, b.id) for a, b in pairs] + [(b.id, a.id) for a, b in pairs]
    assert len(directions) == 2 * (len(rig) - 1)
