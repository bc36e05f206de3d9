import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvoc.core import (
    AffineTransform,
    FlowField,
    Mask,
    VideoTensor,
    affine_apply,
    hadamard_blend,
    mask_resample,
    warp_mask,
)
from mvoc.errors import ConfigError, NumericError


def vt(arr):
    return VideoTensor(np.asarray(arr, dtype=np.float64))


small_videos = st.integers(1, 3).flatmap(
    lambda f: st.tuples(st.just(f), st.integers(1, 2), st.integers(1, 5), st.integers(1, 5))
).flatmap(
    lambda dims: st.lists(
        st.floats(-10, 10, allow_nan=False), min_size=int(np.prod(dims)), max_size=int(np.prod(dims))
    ).map(lambda vals: np.array(vals).reshape(dims))
)


class TestVideoTensor:
    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            vt(np.full((1, 1, 2, 2), np.nan))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ConfigError):
            vt(np.zeros((2, 2)))

    def test_readonly(self):
        v = vt(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0, 0] = 1.0


class TestMask:
    def test_clamps_to_unit_interval(self):
        m = Mask(np.array([[[-1.0, 2.0], [0.5, 1.0]]]))
        assert m.data.min() >= 0.0 and m.data.max() <= 1.0

    def test_binary_check(self):
        assert Mask(np.ones((1, 2, 2))).is_binary()
        assert not Mask(np.full((1, 2, 2), 0.5)).is_binary()


class TestAffineTransform:
    def test_singular_rejected(self):
        with pytest.raises(NumericError):
            AffineTransform(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))

    def test_inverse_roundtrip_points(self, rng):
        t = AffineTransform(np.array([[1.2, 0.3, 4.0], [-0.2, 0.9, -1.0]]))
        pts = rng.normal(size=(10, 2))
        back = t.inverse().apply_points(t.apply_points(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_rescaled_uniform_keeps_linear_block(self):
        t = AffineTransform(np.array([[0.8, 0.1, 6.0], [0.0, 1.1, -2.0]]))
        half = t.rescaled(0.5, 0.5)
        np.testing.assert_allclose(half.linear, t.linear)
        np.testing.assert_allclose(half.translation, t.translation * 0.5)


class TestHadamardBlend:
    def test_zero_mask_returns_base(self, rng):
        base = vt(rng.normal(size=(2, 3, 4, 4)))
        over = vt(rng.normal(size=(2, 3, 4, 4)))
        out = hadamard_blend(base, over, Mask.empty(2, 4, 4))
        assert np.array_equal(out.data, base.data)

    def test_ones_mask_returns_overlay(self, rng):
        base = vt(rng.normal(size=(2, 3, 4, 4)))
        over = vt(rng.normal(size=(2, 3, 4, 4)))
        out = hadamard_blend(base, over, Mask.full(2, 4, 4))
        assert np.array_equal(out.data, over.data)

    def test_midpoint(self):
        base = vt(np.zeros((1, 1, 2, 2)))
        over = vt(np.full((1, 1, 2, 2), 2.0))
        out = hadamard_blend(base, over, Mask(np.full((1, 2, 2), 0.5)))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))

    def test_shape_mismatch(self, rng):
        base = vt(rng.normal(size=(2, 1, 4, 4)))
        with pytest.raises(ConfigError):
            hadamard_blend(base, vt(rng.normal(size=(2, 1, 4, 5))), Mask.full(2, 4, 4))
        with pytest.raises(ConfigError):
            hadamard_blend(base, base, Mask.full(2, 4, 5))

    @given(small_videos, st.data())
    def test_idempotent_and_complementary_with_binary_mask(self, arr, data):
        f, _, h, w = arr.shape
        bits = data.draw(
            st.lists(st.integers(0, 1), min_size=f * h * w, max_size=f * h * w)
        )
        mask = Mask(np.array(bits, dtype=float).reshape(f, h, w))
        base = vt(arr)
        over = vt(arr[::-1].copy() * 0.5 + 1.0)
        once = hadamard_blend(base, over, mask)
        twice = hadamard_blend(once, over, mask)
        assert np.array_equal(once.data, twice.data)
        # blend(a,b,M) + blend(b,a,M) == a + b for binary masks
        swapped = hadamard_blend(over, base, mask)
        np.testing.assert_array_equal(once.data + swapped.data, base.data + over.data)


def brute_force_affine(src, transform, out_h, out_w):
    """Per-pixel inverse-warp bilinear oracle."""
    f, c, h, w = src.shape
    inv = transform.inverse()
    out = np.zeros((f, c, out_h, out_w))
    for y in range(out_h):
        for x in range(out_w):
            sy, sx = inv.apply_points(np.array([[y, x]], dtype=float))[0]
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            wy, wx = sy - y0, sx - x0
            acc = np.zeros((f, c))
            for dy, wwy in ((0, 1 - wy), (1, wy)):
                for dx, wwx in ((0, 1 - wx), (1, wx)):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += wwy * wwx * src[:, :, yy, xx]
            if 0 <= sy <= h - 1 and 0 <= sx <= w - 1:
                out[:, :, y, x] = acc
    return out


class TestAffineApply:
    def test_identity_bit_exact(self, rng):
        v = vt(rng.normal(size=(2, 2, 5, 7)))
        out = affine_apply(v, AffineTransform.identity())
        assert np.array_equal(out.data, v.data)

    def test_translation_moves_hot_pixel_one_row(self):
        grid = np.zeros((1, 1, 3, 3))
        grid[0, 0, 1, 1] = 1.0
        out = affine_apply(vt(grid), AffineTransform.translate(1.0, 0.0))
        expected = np.zeros((1, 1, 3, 3))
        expected[0, 0, 2, 1] = 1.0
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_double_scale_constant_matches_oracle(self):
        v = vt(np.full((1, 1, 4, 4), 3.0))
        t = AffineTransform.scale(2.0)
        out = affine_apply(v, t, (8, 8))
        oracle = brute_force_affine(v.data, t, 8, 8)
        np.testing.assert_allclose(out.data, oracle, atol=1e-12)
        # interior stays constant, far corner falls outside the source
        assert out.data[0, 0, 2, 2] == pytest.approx(3.0)
        assert out.data[0, 0, 7, 7] == 0.0

    def test_random_transform_matches_oracle(self, rng):
        v = vt(rng.normal(size=(2, 2, 6, 5)))
        t = AffineTransform(np.array([[0.9, 0.2, 1.3], [-0.1, 1.1, -0.7]]))
        out = affine_apply(v, t, (7, 6))
        oracle = brute_force_affine(v.data, t, 7, 6)
        np.testing.assert_allclose(out.data, oracle, atol=1e-12)

    def test_inverse_warp_roundtrip_constant_field(self):
        v = vt(np.full((1, 1, 8, 8), 2.5))
        t = AffineTransform.translate(1.5, -0.5)
        there = affine_apply(v, t)
        back = affine_apply(there, t.inverse())
        # pixels that stay in bounds under both warps are exact for constants
        inner = back.data[0, 0, 2:6, 2:6]
        np.testing.assert_allclose(inner, 2.5, atol=1e-12)


def brute_force_area_average(mask, th, tw):
    f, h, w = mask.shape
    out = np.zeros((f, th, tw))
    for i in range(th):
        for j in range(tw):
            y0, y1 = i * h / th, (i + 1) * h / th
            x0, x1 = j * w / tw, (j + 1) * w / tw
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    oy = max(0.0, min(y1, y + 1) - max(y0, y))
                    ox = max(0.0, min(x1, x + 1) - max(x0, x))
                    acc += oy * ox
                    out[:, i, j] += oy * ox * mask[:, y, x]
            out[:, i, j] /= acc
    return out


class TestMaskResample:
    def test_same_dims_unchanged(self):
        m = Mask(np.random.default_rng(0).uniform(size=(2, 4, 4)))
        out = mask_resample(m, 4, 4)
        assert np.array_equal(out.data, m.data)

    def test_all_ones_downsample(self):
        out = mask_resample(Mask.full(1, 4, 4), 2, 2)
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))

    def test_quadrant_downsample(self):
        m = np.zeros((1, 4, 4))
        m[0, :2, :2] = 1.0
        out = mask_resample(Mask(m), 2, 2, threshold=0.5)
        expected = np.zeros((1, 2, 2))
        expected[0, 0, 0] = 1.0
        np.testing.assert_array_equal(out.data, expected)

    def test_downsample_matches_brute_force_before_threshold(self, rng):
        m = rng.uniform(size=(1, 6, 6))
        oracle = brute_force_area_average(m, 4, 3) >= 0.5
        out = mask_resample(Mask(m), 4, 3, threshold=0.5)
        np.testing.assert_array_equal(out.data, oracle.astype(float))

    def test_upsample_nearest_preserves_binary(self):
        m = np.zeros((1, 2, 2))
        m[0, 0, 0] = 1.0
        out = mask_resample(Mask(m), 4, 4)
        assert out.is_binary()
        np.testing.assert_array_equal(out.data[0, :2, :2], np.ones((2, 2)))

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            mask_resample(Mask.full(1, 4, 4), 0, 4)


class TestWarpMask:
    def test_translation(self):
        m = np.zeros((1, 4, 4))
        m[0, 1, 1] = 1.0
        out = warp_mask(Mask(m), AffineTransform.translate(1.0, 1.0))
        assert out.data[0, 2, 2] == 1.0 and out.data.sum() == 1.0


class TestFlowField:
    def test_validates_shape(self):
        with pytest.raises(ConfigError):
            FlowField(np.zeros((2, 3, 4, 4)))

    def test_rejects_huge_displacement(self):
        with pytest.raises(ConfigError):
            FlowField(np.full((1, 2, 4, 4), 100.0))
