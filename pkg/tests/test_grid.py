import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothreg import grid


def loop_bilinear(img, x, y):
    """Per-point reference: clamp, then weight the four neighbours."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


class TestGaussianKernel:
    @pytest.mark.parametrize("sigma", [0.3, 1.0, 1.5, 2.7, 8.0])
    def test_taps(self, sigma):
        k = grid.GaussianKernel1D(sigma)
        assert k.radius == math.ceil(3 * sigma)
        assert len(k.weights) == 2 * k.radius + 1
        assert abs(k.weights.sum() - 1.0) < 1e-12
        np.testing.assert_array_equal(k.weights, k.weights[::-1])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            grid.GaussianKernel1D(0.0)


class TestBlur:
    def test_impulse_is_outer_product_of_taps(self):
        f = np.zeros((11, 11))
        f[5, 5] = 1.0
        k = np.arange(-3, 4)
        taps = np.exp(-(k**2) / 2.0)
        taps /= taps.sum()
        out = grid.gaussian_blur(f, 1.0)
        np.testing.assert_allclose(out[2:9, 2:9], np.outer(taps, taps), atol=1e-15)
        assert np.all(out[:2] == 0) and np.all(out[:, 9:] == 0)

    def test_sigma_zero_is_verbatim(self):
        f = np.random.default_rng(0).random((5, 6, 2))
        assert grid.gaussian_blur(f, 0.0) is f

    def test_constant_preserved(self):
        f = np.full((9, 13, 2), 0.37)
        np.testing.assert_allclose(grid.gaussian_blur(f, 2.5), f, rtol=1e-14)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            grid.gaussian_blur(np.zeros((4, 4)), -1.0)

    def test_channels_independent(self):
        rng = np.random.default_rng(1)
        f = rng.random((12, 10, 3))
        out = grid.gaussian_blur(f, 1.2)
        for c in range(3):
            np.testing.assert_allclose(out[..., c], grid.gaussian_blur(f[..., c], 1.2), rtol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.4, 3.0), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, seed, sigma, a, b):
        rng = np.random.default_rng(seed)
        f, g = rng.standard_normal((2, 14, 17))
        lhs = grid.gaussian_blur(a * f + b * g, sigma)
        rhs = a * grid.gaussian_blur(f, sigma) + b * grid.gaussian_blur(g, sigma)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * (abs(a) + abs(b)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.4, 3.0))
    def test_mean_preserved(self, seed, sigma):
        f = np.random.default_rng(seed).random((16, 19))
        assert abs(grid.gaussian_blur(f, sigma).mean() - f.mean()) <= 1e-10 * abs(f.mean())

    def test_self_adjoint(self):
        rng = np.random.default_rng(2)
        f, g = rng.standard_normal((2, 15, 12))
        lhs = np.sum(grid.gaussian_blur(f, 1.5) * g)
        rhs = np.sum(f * grid.gaussian_blur(g, 1.5))
        assert abs(lhs - rhs) < 1e-12 * abs(lhs)


class TestBilinear:
    def test_integer_coordinate(self):
        img = np.random.default_rng(0).random((8, 7))
        assert grid.bilinear_sample(img, 3, 5) == img[5, 3]

    def test_midpoint(self):
        img = np.array([[0.2, 0.6]])
        assert grid.bilinear_sample(img, 0.5, 0.0) == pytest.approx(0.4, abs=1e-15)

    def test_clamp_left(self):
        img = np.random.default_rng(1).random((4, 5))
        assert grid.bilinear_sample(img, -2.7, 0.0) == img[0, 0]

    def test_vectorized_matches_loop(self):
        rng = np.random.default_rng(3)
        img = rng.random((9, 11))
        xs = rng.uniform(-3, 14, 200)
        ys = rng.uniform(-3, 12, 200)
        ref = np.array([loop_bilinear(img, x, y) for x, y in zip(xs, ys)])
        np.testing.assert_allclose(grid.bilinear_sample(img, xs, ys), ref, rtol=0, atol=1e-14)

    def test_empty_image(self):
        with pytest.raises(ValueError):
            grid.bilinear_sample(np.zeros((0, 3)), 0.0, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-2, 12), st.floats(-2, 9), st.floats(-1e-6, 1e-6), st.floats(-1e-6, 1e-6))
    def test_continuity(self, x, y, dx, dy):
        img = np.random.default_rng(4).random((8, 11))
        a = grid.bilinear_sample(img, x, y)
        b = grid.bilinear_sample(img, x + dx, y + dy)
        eps = max(abs(dx), abs(dy))
        assert abs(a - b) <= 4 * eps * img.max() + 1e-15


class TestWarp:
    def test_zero_field_identity(self):
        img = np.random.default_rng(5).random((10, 12))
        out = grid.warp(img, np.zeros((10, 12, 2)))
        np.testing.assert_array_equal(out, img)

    def test_ramp_shift(self):
        h, w = 5, 8
        img = np.tile(np.arange(w) / (w - 1), (h, 1))
        u = np.zeros((h, w, 2))
        u[..., 0] = 1.0
        expect = np.tile(np.minimum(np.arange(w) + 1, w - 1) / (w - 1), (h, 1))
        np.testing.assert_allclose(grid.warp(img, u), expect, atol=1e-15)

    def test_matches_per_pixel_loop(self):
        rng = np.random.default_rng(6)
        img = rng.random((8, 8))
        u = rng.normal(0, 1.5, (8, 8, 2))
        ref = np.empty((8, 8))
        for r in range(8):
            for c in range(8):
                ref[r, c] = loop_bilinear(img, c + u[r, c, 0], r + u[r, c, 1])
        np.testing.assert_allclose(grid.warp(img, u), ref, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            grid.warp(np.zeros((4, 4)), np.zeros((4, 5, 2)))
        with pytest.raises(ValueError):
            grid.warp(np.zeros((4, 4)), np.zeros((4, 4, 3)))

    def test_vector_field_sample(self):
        rng = np.random.default_rng(7)
        field = rng.random((6, 7, 2))
        u = rng.normal(0, 1, (6, 7, 2))
        out = grid.sample(field, u)
        for c in range(2):
            np.testing.assert_allclose(out[..., c], grid.sample(field[..., c], u), atol=1e-15)

    def test_vjp_is_adjoint_in_image(self):
        rng = np.random.default_rng(8)
        img = rng.random((7, 9))
        u = rng.normal(0, 2, (7, 9, 2))
        g = rng.standard_normal((7, 9))
        g_img, _ = grid.sample_vjp(img, u, g)
        probe = rng.standard_normal((7, 9))
        assert np.sum(grid.sample(probe, u) * g) == pytest.approx(np.sum(probe * g_img), rel=1e-12)


class TestSpatialGradient:
    def test_constant(self):
        gx, gy = grid.spatial_gradient(np.full((5, 6), 3.0))
        assert not gx.any() and not gy.any()

    def test_ramp(self):
        f = 2.0 * np.tile(np.arange(7.0), (5, 1))
        gx, gy = grid.spatial_gradient(f)
        np.testing.assert_allclose(gx, 2.0)
        np.testing.assert_allclose(gy, 0.0)

    def test_impulse_stencil(self):
        f = np.zeros((5, 5))
        f[2, 2] = 1.0
        gx, gy = grid.spatial_gradient(f)
        # central difference: +-1/2 at the horizontal neighbours, zero elsewhere
        expect_x = np.zeros((5, 5))
        expect_x[2, 1], expect_x[2, 3] = 0.5, -0.5
        np.testing.assert_array_equal(gx, expect_x)
        np.testing.assert_array_equal(gy, expect_x.T)

    def test_one_sided_border(self):
        f = np.array([[0.0, 1.0, 4.0, 9.0]] * 3)
        gx, _ = grid.spatial_gradient(f)
        np.testing.assert_allclose(gx[0], [1.0, 2.0, 4.0, 5.0])

    def test_degenerate(self):
        with pytest.raises(ValueError):
            grid.spatial_gradient(np.zeros((1, 5)))

    def test_adjoint(self):
        rng = np.random.default_rng(9)
        f = rng.standard_normal((6, 8))
        gx, gy = rng.standard_normal((2, 6, 8))
        ax, ay = grid.spatial_gradient(f)
        lhs = np.sum(ax * gx) + np.sum(ay * gy)
        rhs = np.sum(f * grid.spatial_gradient_adjoint(gx, gy))
        assert lhs == pytest.approx(rhs, rel=1e-12)
