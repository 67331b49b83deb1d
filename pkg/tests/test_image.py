import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flowgauge.errors import DimensionError
from flowgauge.image import (FlowField, as_gray, bilinear_sample, build_pyramid, gradient,
                             gradient_adjoint, resize, sample, to_grayscale, upsample_flow, warp)


def _bilinear_oracle(img, x, y):
    """Scalar clamp-to-edge bilinear interpolation written out longhand."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1 - fy) * top + fy * bot


class TestGrayscale:
    def test_white_black(self):
        assert to_grayscale(np.full((1, 1, 3), 255))[0, 0] == pytest.approx(1.0)
        assert to_grayscale(np.zeros((1, 1, 3)))[0, 0] == 0.0

    def test_pure_red_is_red_weight(self):
        px = np.array([[[255, 0, 0]]])
        assert to_grayscale(px)[0, 0] == pytest.approx(0.299, abs=1e-12)

    def test_channel_list_form(self):
        r = np.full((2, 3), 255.0)
        z = np.zeros((2, 3))
        np.testing.assert_allclose(to_grayscale([z, r, z]), 0.587)

    def test_mismatched_channels(self):
        with pytest.raises(DimensionError):
            to_grayscale([np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2))])
        with pytest.raises(DimensionError):
            to_grayscale(np.zeros((4, 4)))

    def test_as_gray_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            as_gray(np.full((3, 3), 1.5))
        with pytest.raises(DimensionError):
            as_gray(np.zeros(5))


class TestGradient:
    def test_constant(self):
        ix, iy = gradient(np.full((6, 7), 0.3))
        assert not ix.any() and not iy.any()

    def test_horizontal_ramp(self):
        img = np.tile(np.arange(5) / 4.0, (5, 1))
        ix, iy = gradient(img)
        np.testing.assert_allclose(ix[1:-1, 1:-1], 0.25)
        np.testing.assert_allclose(iy, 0.0)

    def test_vertical_ramp(self):
        img = np.tile((np.arange(6) / 5.0)[:, None], (1, 4))
        ix, iy = gradient(img)
        np.testing.assert_allclose(iy[1:-1, 1:-1], 0.2)
        np.testing.assert_allclose(ix, 0.0)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            gradient(np.zeros((2, 5)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (5, 6), elements=st.floats(-1, 1)),
           arrays(np.float64, (5, 6), elements=st.floats(-1, 1)),
           arrays(np.float64, (5, 6), elements=st.floats(-1, 1)))
    def test_adjoint_identity(self, u, px, py):
        ix, iy = gradient(u)
        lhs = np.sum(ix * px + iy * py)
        rhs = np.sum(u * gradient_adjoint(px, py))
        assert lhs == pytest.approx(rhs, abs=1e-10)


class TestSampling:
    def test_integer_positions_exact(self):
        img = np.random.default_rng(0).random((5, 6))
        assert bilinear_sample(img, 3, 2) == img[2, 3]

    def test_centre_of_2x2_is_mean(self):
        img = np.array([[0.1, 0.2], [0.4, 0.9]])
        assert bilinear_sample(img, 0.5, 0.5) == pytest.approx(img.mean())

    def test_clamp(self):
        img = np.random.default_rng(1).random((4, 4))
        assert bilinear_sample(img, -3.7, 1.0) == bilinear_sample(img, 0.0, 1.0)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            bilinear_sample(np.zeros((3, 3)), np.nan, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-3, 10), st.floats(-3, 8), st.integers(0, 10_000))
    def test_matches_oracle(self, x, y, seed):
        img = np.random.default_rng(seed).random((6, 8))
        assert sample(img, np.array([x]), np.array([y]))[0] == pytest.approx(_bilinear_oracle(img, x, y), abs=1e-12)


class TestWarp:
    def test_zero_flow_identity(self):
        img = np.random.default_rng(2).random((7, 5))
        np.testing.assert_array_equal(warp(img, FlowField.zeros(img.shape)), img)

    def test_unit_shift_takes_right_neighbour(self):
        img = np.tile(np.arange(4) / 3.0, (4, 1))
        out = warp(img, FlowField.uniform(img.shape, 1.0, 0.0))
        expected = np.tile(np.array([1, 2, 3, 3]) / 3.0, (4, 1))
        np.testing.assert_allclose(out, expected)

    def test_half_shift_midpoints(self):
        img = np.tile(np.arange(6) / 5.0, (3, 1))
        out = warp(img, FlowField.uniform(img.shape, 0.5, 0.0))
        np.testing.assert_allclose(out[:, :-1], 0.5 * (img[:, :-1] + img[:, 1:]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            warp(np.zeros((4, 4)), FlowField.zeros((4, 5)))


class TestPyramid:
    def test_level_sizes(self):
        pyr = build_pyramid(np.zeros((256, 256)), 0.5, 16)
        assert [lv.shape[0] for lv in pyr.levels] == [256, 128, 64, 32, 16]

    def test_stopping_rule(self):
        assert len(build_pyramid(np.zeros((20, 20)), 0.5, 16)) == 1

    def test_constant_preserved(self):
        for lv in build_pyramid(np.full((64, 48), 0.42)).levels:
            np.testing.assert_allclose(lv, 0.42, atol=1e-12)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            build_pyramid(np.zeros((32, 32)), 1.0)
        with pytest.raises(ValueError):
            build_pyramid(np.zeros((32, 32)), 0.0)

    def test_ratios_track_shapes(self):
        pyr = build_pyramid(np.zeros((100, 60)), 0.5, 16)
        for lv, (rx, ry) in zip(pyr.levels, pyr.ratios):
            assert lv.shape[1] == pytest.approx(60 * rx)
            assert lv.shape[0] == pytest.approx(100 * ry)

    def test_resize_constant(self):
        np.testing.assert_allclose(resize(np.full((10, 12), 0.7), (5, 6)), 0.7)

    def test_upsample_flow_scales_vectors(self):
        f = upsample_flow(FlowField.uniform((8, 8), 1.0, -2.0), (16, 16))
        np.testing.assert_allclose(f.u, 2.0)
        np.testing.assert_allclose(f.v, -4.0)
