import math

import numpy as np
import pytest

from smoothreg import bench, grid, registrar
from smoothreg.registrar import Adam, OptimConfig, PyramidConfig
from smoothreg.smoothproper import SPConfig, init_basis, sp_forward


def textured(seed, size=64):
    tex = grid.gaussian_blur(np.random.default_rng(seed).random((size, size)), 1.5)
    return (tex - tex.min()) / np.ptp(tex)


def ref_bilinear(img, x, y):
    h, w = img.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = min(int(math.floor(x)), w - 2), min(int(math.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )


class TestPyramid:
    def test_single_level(self):
        img = textured(0)
        levels = registrar.build_pyramid(img, PyramidConfig(levels=1))
        assert len(levels) == 1
        np.testing.assert_array_equal(levels[0], img)

    def test_sizes(self):
        sizes = [lv.shape for lv in registrar.build_pyramid(textured(1), PyramidConfig(levels=3))]
        assert sizes == [(64, 64), (32, 32), (16, 16)]

    def test_constant(self):
        for lv in registrar.build_pyramid(np.full((64, 80), 0.3), PyramidConfig(levels=3)):
            np.testing.assert_allclose(lv, 0.3, rtol=1e-14)

    def test_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            registrar.build_pyramid(np.zeros((40, 40)), PyramidConfig(levels=3))

    def test_downsample_averages_pairs(self):
        img = np.arange(16.0).reshape(4, 4)
        # sample points sit halfway between pixel pairs
        np.testing.assert_allclose(registrar.downsample(img), [[2.5, 4.5], [10.5, 12.5]])

    @pytest.mark.parametrize("kw", [{"levels": 0}, {"downsample": 3}, {"pre_blur_sigma": -1.0}])
    def test_config_rejects(self, kw):
        with pytest.raises(ValueError):
            PyramidConfig(**kw)


class TestUpsample:
    def test_zero(self):
        assert not registrar.upsample_flow(np.zeros((5, 6, 2))).any()

    def test_constant_doubles(self):
        u = np.zeros((5, 6, 2))
        u[..., 0] = 1.0
        out = registrar.upsample_flow(u)
        assert out.shape == (10, 12, 2)
        np.testing.assert_allclose(out[..., 0], 2.0, rtol=1e-15)
        np.testing.assert_allclose(out[..., 1], 0.0, atol=0)

    def test_matches_oracle(self):
        u = np.random.default_rng(2).normal(0, 1, (6, 7, 2))
        out = registrar.upsample_flow(u, (13, 14))
        for r in range(13):
            for c in range(14):
                expect = 2 * ref_bilinear(u, (c + 0.5) / 2 - 0.5, (r + 0.5) / 2 - 0.5)
                np.testing.assert_allclose(out[r, c], expect, atol=1e-14)

    def test_factor(self):
        with pytest.raises(ValueError):
            registrar.upsample_flow(np.zeros((4, 4, 2)), factor=3)


class TestOptimizer:
    def test_lr_schedule_endpoints(self):
        opt = OptimConfig(iterations=11, step_size=0.2, final_lr_fraction=0.1)
        assert opt.lr(0) == pytest.approx(0.2)
        assert opt.lr(10) == pytest.approx(0.02)
        assert all(opt.lr(t) >= opt.lr(t + 1) for t in range(10))

    @pytest.mark.parametrize("kw", [{"iterations": 0}, {"step_size": 0.0}, {"level_step_factor": 0.0}])
    def test_config_rejects(self, kw):
        with pytest.raises(ValueError):
            OptimConfig(**kw)

    def test_adam_first_step_is_sign(self):
        adam = Adam((3,))
        x = adam.step(np.zeros(3), np.array([2.0, -1e-3, 0.0]), 0.5)
        np.testing.assert_allclose(x, [-0.5, 0.5, 0.0], atol=1e-4)

    def test_adam_projection(self):
        adam = Adam((2,), lower=0.0)
        x = adam.step(np.array([0.1, 1.0]), np.array([1.0, 1.0]), 0.5)
        np.testing.assert_allclose(x, [0.0, 0.5], atol=1e-7)

    def test_adam_minimizes_quadratic(self):
        adam = Adam((2,))
        x = np.array([3.0, -2.0])
        for _ in range(2000):
            x = adam.step(x, 2 * x, 0.01)
        assert np.linalg.norm(x) < 1e-2


class TestLayerGain:
    def test_bypass_is_unit(self):
        assert registrar.layer_gain(init_basis(9), SPConfig(m=9, K=0)) == 1.0

    def test_matches_constant_response(self):
        B = init_basis(36)
        cfg = SPConfig()
        g = registrar.layer_gain(B, cfg)
        p = np.zeros((6, 6, 36))
        p[..., 35] = 0.01
        u = sp_forward(p, B, cfg=cfg).u
        np.testing.assert_allclose(u, np.broadcast_to(g * 0.01 * B[35], u.shape), rtol=1e-10)
        assert g > 1.0


class TestRegister:
    def test_identical_images(self):
        img = textured(3)
        res = registrar.register(img, img, pyramid=PyramidConfig(levels=2), opt=OptimConfig(iterations=20))
        assert np.mean(np.linalg.norm(res.u, axis=-1)) < 0.1
        assert res.level_energies[-1]["loss"] == pytest.approx(-1.0, abs=1e-3)

    def test_deterministic(self):
        pair = bench.synth_pair(bench.SynthSpec(size=64, vessel_count=3, shift=3.0, seed=1))
        kw = dict(pyramid=PyramidConfig(levels=2), opt=OptimConfig(iterations=5))
        a = registrar.register(pair.fixed, pair.moving, **kw)
        b = registrar.register(pair.fixed, pair.moving, **kw)
        np.testing.assert_array_equal(a.phi, b.phi)
        assert a.losses().tolist() == b.losses().tolist()

    def test_trace_and_diagnostics(self):
        img = textured(4)
        res = registrar.register(img, np.roll(img, 1, axis=1), pyramid=PyramidConfig(levels=2), opt=OptimConfig(iterations=7))
        assert len(res.trace) == 14
        assert [row[1] for row in res.trace] == [1] * 7 + [0] * 7
        assert [e["level"] for e in res.level_energies] == [1, 0]
        assert set(res.jacobian) == {"min", "percent_nonpositive"}
        assert res.u.shape == res.phi.shape == (64, 64, 2)
        assert res.runtime > 0

    def test_reduces_loss(self):
        img = textured(5)
        moving = grid.warp(img, np.full((64, 64, 2), 1.5))
        res = registrar.register(img, moving, pyramid=PyramidConfig(levels=2), opt=OptimConfig(iterations=30))
        assert res.level_energies[-1]["loss"] < res.trace[0][2]

    def test_optimize_basis_keeps_radius(self):
        img = textured(6)
        moving = np.roll(img, 2, axis=0)
        res = registrar.register(
            img, moving, sp=SPConfig(m=9), pyramid=PyramidConfig(levels=2), opt=OptimConfig(iterations=5, optimize_basis=True)
        )
        for B in res.basis:
            assert np.linalg.norm(np.asarray(B), axis=1).max() <= np.sqrt(2) * 1.0 + 1e-12
        assert not np.array_equal(np.asarray(res.basis[-1]), init_basis(9))

    def test_non_finite_aborts(self):
        img = textured(7)
        bad = img.copy()
        bad[10, 10] = np.nan
        with pytest.raises(registrar.NumericalError) as err:
            registrar.register(img, bad, pyramid=PyramidConfig(levels=2), opt=OptimConfig(iterations=3))
        assert err.value.snapshot["iteration"] == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            registrar.register(np.zeros((64, 64)), np.zeros((64, 32)))


@pytest.fixture(scope="module")
def translation_errors():
    spec = bench.SynthSpec(
        size=96, vessel_shape="grid", vessel_count=4, deformation="translation", translation=(6.0, -3.0), seed=0
    )
    pair = bench.synth_pair(spec)
    mask = bench.evaluation_mask(pair)
    out = {}
    for K in (6, 0):
        res = registrar.register(pair.fixed, pair.moving, sp=SPConfig(K=K))
        out[K] = bench.endpoint_error(res.phi, pair.gt_flow, mask)
    return out


@pytest.mark.slow
class TestTranslationRecovery:
    def test_full_pipeline(self, translation_errors):
        # oracle run: 0.40 px
        assert translation_errors[6] < 1.0

    def test_bypass_is_worse(self, translation_errors):
        # oracle run: 1.04 px
        assert translation_errors[0] > translation_errors[6]
