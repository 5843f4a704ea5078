import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothreg import grid
from smoothreg.adjoint import grad_check
from smoothreg.energy import LossConfig, diffusive_reg, level_window, lncc, lncc_map, total_loss


def reflect_index(i, n):
    # scipy "reflect": (d c b a | a b c d | d c b a)
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - i - 1
    return i


def naive_lncc(a, b, window, floor=1e-5):
    h, w = a.shape
    r = window // 2
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            rows = [reflect_index(y + k, h) for k in range(-r, r + 1)]
            cols = [reflect_index(x + k, w) for k in range(-r, r + 1)]
            pa = a[np.ix_(rows, cols)].ravel()
            pb = b[np.ix_(rows, cols)].ravel()
            ma, mb = pa.mean(), pb.mean()
            cov = np.mean(pa * pb) - ma * mb
            va = max(np.mean(pa * pa) - ma * ma, floor)
            vb = max(np.mean(pb * pb) - mb * mb, floor)
            out[y, x] = cov / np.sqrt(va * vb)
    return out


def textured(seed, shape=(16, 16)):
    return np.random.default_rng(seed).random(shape)


class TestLossConfig:
    @pytest.mark.parametrize("kw", [{"lncc_window": 4}, {"lncc_window": 1}, {"lam": -1.0}, {"variance_floor": 0.0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)

    @pytest.mark.parametrize("level,expect", [(0, 9), (1, 5), (2, 3), (3, 3)])
    def test_level_window(self, level, expect):
        assert level_window(9, level) == expect


class TestLNCC:
    def test_self_correlation(self):
        a = textured(0)
        assert lncc(a, a) == pytest.approx(1.0, abs=1e-6)

    def test_anticorrelation(self):
        a = textured(1)
        assert lncc(a, 1.0 - a) == pytest.approx(-1.0, abs=1e-6)

    @pytest.mark.parametrize("window", [3, 5, 9])
    def test_matches_naive_windows(self, window):
        rng = np.random.default_rng(2)
        a, b = rng.random((2, 16, 16))
        ref = naive_lncc(a, b, window)
        np.testing.assert_allclose(lncc_map(a, b, window), ref, rtol=0, atol=1e-10)
        assert lncc(a, b, window) == pytest.approx(ref.mean(), abs=1e-10)

    def test_flat_region_floored(self):
        a = np.zeros((12, 12))
        b = textured(3, (12, 12))
        np.testing.assert_allclose(lncc_map(a, b, 5), naive_lncc(a, b, 5), atol=1e-12)
        assert np.all(np.abs(lncc_map(a, b, 5)) <= 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lncc(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_even_window(self):
        with pytest.raises(ValueError):
            lncc(np.zeros((8, 8)), np.zeros((8, 8)), window=4)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 14, 13))
        assert abs(lncc(a, b, 5) - lncc(b, a, 5)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.2, 5.0), st.floats(-2.0, 2.0))
    def test_affine_invariant(self, seed, scale, offset):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 14, 14))
        assert abs(lncc(a, scale * b + offset, 5) - lncc(a, b, 5)) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 10, 10))
        b[:5] = 0.5  # flat patch exercises the floor
        m = lncc_map(a, b, 5)
        assert np.all(m <= 1.0 + 1e-12) and np.all(m >= -1.0 - 1e-12)


class TestDiffusiveReg:
    def test_zero(self):
        assert diffusive_reg(np.zeros((6, 7, 2))) == 0.0

    def test_constant(self):
        u = np.empty((6, 7, 2))
        u[..., 0], u[..., 1] = 3.5, -1.25
        assert diffusive_reg(u) == 0.0

    def test_ramp_stencil(self):
        h, w = 6, 9
        u = np.zeros((h, w, 2))
        u[..., 0] = np.arange(w)
        # every column difference is 1 (central and one-sided alike), rows are flat
        per_pixel = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                if x == 0:
                    d = u[y, 1, 0] - u[y, 0, 0]
                elif x == w - 1:
                    d = u[y, x, 0] - u[y, x - 1, 0]
                else:
                    d = (u[y, x + 1, 0] - u[y, x - 1, 0]) / 2
                per_pixel[y, x] = d * d
        np.testing.assert_array_equal(per_pixel[1:-1, 1:-1], 1.0)
        assert diffusive_reg(u) == pytest.approx(per_pixel.mean(), rel=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-4.0, 4.0))
    def test_quadratic_homogeneity(self, seed, c):
        u = np.random.default_rng(seed).standard_normal((8, 9, 2))
        assert diffusive_reg(c * u) == pytest.approx(c * c * diffusive_reg(u), rel=1e-10, abs=1e-300)


class TestTotalLoss:
    def test_identical_images(self):
        a = textured(4)
        z = np.zeros((16, 16, 2))
        assert total_loss(a, a, z, z, LossConfig()) == pytest.approx(-1.0, abs=1e-6)

    def test_lambda_zero_is_negative_lncc(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((2, 16, 16))
        phi = rng.normal(0, 1, (16, 16, 2))
        u = rng.normal(0, 1, (16, 16, 2))
        got = total_loss(a, b, phi, u, LossConfig(lam=0.0))
        assert got == pytest.approx(-lncc(a, grid.warp(b, phi)), abs=1e-14)

    def test_sum_of_parts(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((2, 16, 16))
        phi = rng.normal(0, 1, (16, 16, 2))
        u = rng.normal(0, 1, (16, 16, 2))
        cfg = LossConfig(lncc_window=5, lam=0.7)
        warped = np.array([[naive_bilinear(b, x + phi[y, x, 0], y + phi[y, x, 1]) for x in range(16)] for y in range(16)])
        expect = -naive_lncc(a, warped, 5).mean() + 0.7 * diffusive_reg(u)
        assert total_loss(a, b, phi, u, cfg) == pytest.approx(expect, abs=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        a = grid.gaussian_blur(rng.random((16, 16)), 1.0)
        b = grid.gaussian_blur(rng.random((16, 16)), 1.0)
        cfg = LossConfig(lncc_window=5)

        def fn(t, phi, u):
            return total_loss(a, b, phi, u, cfg, tape=t)

        # keep sample points away from pixel centres where bilinear is not smooth
        phi = 0.3 + 0.4 * rng.random((16, 16, 2))
        u = rng.normal(0, 0.5, (16, 16, 2))
        assert grad_check(fn, [phi, u], epsilon=1e-6) < 1e-4


def naive_bilinear(img, x, y):
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = min(int(x), w - 2), min(int(y), h - 2)
    fx, fy = x - x0, y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )
