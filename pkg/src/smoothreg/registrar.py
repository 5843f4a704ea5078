"""Coarse-to-fine instance optimization through the smoothing layer."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffeo, grid
from .adjoint import Tape
from .diffeo import IntegrationConfig
from .energy import LossConfig, diffusive_reg, level_window, lncc
from .smoothproper import SPConfig, sp_forward

log = logging.getLogger(__name__)

__all__ = [
    "PyramidConfig",
    "OptimConfig",
    "RegistrationResult",
    "NumericalError",
    "Adam",
    "build_pyramid",
    "downsample",
    "upsample_flow",
    "layer_gain",
    "register",
]


class NumericalError(RuntimeError):
    """Raised when the loss becomes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class PyramidConfig:
    levels: int = 3
    downsample: int = 2
    pre_blur_sigma: float = 1.0
    min_size: int = 16

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.downsample != 2:
            raise ValueError("only a downsampling factor of 2 is supported")
        if self.pre_blur_sigma < 0:
            raise ValueError("pre_blur_sigma must be >= 0")


@dataclass
class OptimConfig:
    iterations: int = 50
    step_size: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    final_lr_fraction: float = 0.1
    decay_power: float = 0.9
    seed: int = 0
    optimize_basis: bool = False
    basis_step_size: float = 0.01
    # step sizes are divided by the layer's constant-field gain
    normalize_gain: bool = True
    # step at pyramid level l is scaled by level_step_factor ** l
    level_step_factor: float = 0.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.level_step_factor > 0:
            raise ValueError("level_step_factor must be positive")

    def lr(self, t: int) -> float:
        """Polynomial decay from ``step_size`` to ``final_lr_fraction * step_size``."""
        frac = 1.0 - t / max(self.iterations - 1, 1)
        f = self.final_lr_fraction
        return self.step_size * (f + (1.0 - f) * frac**self.decay_power)


class Adam:
    """Adam moments for one array, with an optional lower bound (projection)."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8, lower=None):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lower = lower

    def step(self, x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        x = x - lr * mhat / (np.sqrt(vhat) + self.eps)
        if self.lower is not None:
            x = np.maximum(x, self.lower)
        return x


@dataclass
class RegistrationResult:
    u: np.ndarray
    phi: np.ndarray
    trace: list = field(default_factory=list)  # (iteration, level, loss, lncc, reg)
    level_energies: list = field(default_factory=list)
    jacobian: dict = field(default_factory=dict)
    sp_disabled: bool = False
    basis: list = field(default_factory=list)
    runtime: float = 0.0

    def losses(self) -> np.ndarray:
        return np.array([row[2] for row in self.trace])


def downsample(img: np.ndarray) -> np.ndarray:
    """2x bilinear downsampling (pixel-centre aligned, floor of odd sizes)."""
    h, w = img.shape[:2]
    nh, nw = h // 2, w // 2
    ys, xs = np.meshgrid(2.0 * np.arange(nh) + 0.5, 2.0 * np.arange(nw) + 0.5, indexing="ij")
    return grid.bilinear_sample(img, xs, ys)


def build_pyramid(img: np.ndarray, cfg: PyramidConfig | None = None) -> list[np.ndarray]:
    """Level 0 is the input; each further level is blurred then halved (coarse last)."""
    cfg = cfg or PyramidConfig()
    h, w = img.shape[:2]
    coarsest = min(h, w) // 2 ** (cfg.levels - 1)
    if coarsest < cfg.min_size:
        raise ValueError(f"image {h}x{w} too small for {cfg.levels} levels (coarsest side {coarsest} < {cfg.min_size})")
    levels = [np.asarray(img, dtype=np.float64)]
    for _ in range(cfg.levels - 1):
        levels.append(downsample(grid.gaussian_blur(levels[-1], cfg.pre_blur_sigma)))
    return levels


def upsample_flow(u: np.ndarray, shape: tuple[int, int] | None = None, factor: int = 2) -> np.ndarray:
    """Bilinear upsampling of a displacement field, magnitudes multiplied by ``factor``."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    h, w = u.shape[:2]
    nh, nw = shape if shape is not None else (2 * h, 2 * w)
    ys, xs = np.meshgrid((np.arange(nh) + 0.5) / 2.0 - 0.5, (np.arange(nw) + 0.5) / 2.0 - 0.5, indexing="ij")
    return factor * grid.bilinear_sample(u, xs, ys)


def layer_gain(B: np.ndarray, cfg: SPConfig) -> float:
    """Response of the layer's displacement to a constant unit displacement input.

    Measured along the largest basis atom by a difference of two constant
    coefficient fields (blur is exact on constants, so 4x4 suffices).
    """
    if cfg.K == 0:
        return 1.0
    i = int(np.argmax(np.sum(B * B, axis=1)))
    p0 = np.zeros((4, 4, B.shape[0]))
    p1 = p0.copy()
    p1[..., i] = 1.0
    u0 = sp_forward(p0, B, cfg=cfg).u[0, 0]
    u1 = sp_forward(p1, B, cfg=cfg).u[0, 0]
    return float(np.dot(u1 - u0, B[i]) / np.dot(B[i], B[i]))


def _clip_basis(B: np.ndarray, radius: float) -> np.ndarray:
    n = np.linalg.norm(B, axis=1, keepdims=True)
    return B * np.minimum(1.0, radius / np.maximum(n, 1e-12))


def _level_step(fixed, moving, acc, p, B, sp, loss, integ, window, want_grad_B):
    tape = Tape()
    pv = tape.input(p)
    Bv = tape.input(B)
    u = sp_forward(pv, Bv, cfg=sp, tape=tape).u
    phi = diffeo.scaling_squaring(u, integ, tape=tape)
    total = tape.record("compose", phi, acc)
    warped = tape.record("warp", moving, total)
    sim = tape.record("lncc", fixed, warped, window=window, variance_floor=loss.variance_floor)
    reg = tape.record("diffusive_reg", u)
    obj = reg * loss.lam - sim
    grads = tape.backward(obj)
    gB = grads[Bv] if want_grad_B else None
    return float(obj.value), float(sim.value), float(reg.value), grads[pv], gB


def register(
    fixed: np.ndarray,
    moving: np.ndarray,
    pyramid: PyramidConfig | None = None,
    sp: SPConfig | None = None,
    loss: LossConfig | None = None,
    opt: OptimConfig | None = None,
    integration: IntegrationConfig | None = None,
) -> RegistrationResult:
    """Register ``moving`` onto ``fixed``; ``warp(moving, result.phi) ~ fixed``.

    Each level starts from zero coefficients, optimizes them with projected
    Adam through the layer, integration and loss, and composes its
    deformation onto the upsampled flow of the coarser levels.
    """
    pyramid = pyramid or PyramidConfig()
    sp = sp or SPConfig()
    loss = loss or LossConfig()
    opt = opt or OptimConfig()
    integ = integration or IntegrationConfig()
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed {fixed.shape} and moving {moving.shape} differ in shape")
    t0 = time.perf_counter()
    pyr_f = build_pyramid(fixed, pyramid)
    pyr_m = build_pyramid(moving, pyramid)
    B0 = sp.basis()
    radius = float(np.max(np.linalg.norm(B0, axis=1))) if B0.size else 0.0
    gain = layer_gain(B0, sp) if opt.normalize_gain else 1.0

    result = RegistrationResult(u=None, phi=None, sp_disabled=sp.K == 0)
    acc = None
    u_sum = None
    it = 0
    for level in range(pyramid.levels - 1, -1, -1):
        f_l, m_l = pyr_f[level], pyr_m[level]
        shape = f_l.shape
        if acc is None:
            acc = np.zeros(shape + (2,))
            u_sum = np.zeros(shape + (2,))
        else:
            acc = upsample_flow(acc, shape)
            u_sum = upsample_flow(u_sum, shape)
        window = level_window(loss.lncc_window, level)
        p = np.zeros(shape + (B0.shape[0],))
        B = B0.copy()
        adam_p = Adam(p.shape, opt.beta1, opt.beta2, opt.eps, lower=0.0)
        adam_B = Adam(B.shape, opt.beta1, opt.beta2, opt.eps)
        for t in range(opt.iterations):
            obj, sim, reg, gp, gB = _level_step(f_l, m_l, acc, p, B, sp, loss, integ, window, opt.optimize_basis)
            if not np.isfinite(obj) or not np.all(np.isfinite(gp)):
                raise NumericalError(
                    f"non-finite loss at level {level}, iteration {t}",
                    {"level": level, "iteration": t, "loss": obj, "lncc": sim, "reg": reg,
                     "max_abs_p": float(np.max(np.abs(p))), "max_abs_acc": float(np.max(np.abs(acc)))},
                )
            result.trace.append((it, level, obj, sim, reg))
            it += 1
            lr = opt.lr(t) * opt.level_step_factor**level
            p = adam_p.step(p, gp, lr / gain)
            if opt.optimize_basis:
                B = _clip_basis(adam_B.step(B, gB, opt.basis_step_size * opt.lr(t) / opt.step_size), radius)
        u_l = sp_forward(p, B, cfg=sp).u
        phi_l = diffeo.scaling_squaring(u_l, integ)
        acc = diffeo.compose(phi_l, acc)
        u_sum = u_sum + u_l
        final = -lncc(f_l, grid.warp(m_l, acc), window, loss.variance_floor) + loss.lam * diffusive_reg(u_l)
        result.level_energies.append({"level": level, "loss": final, "shape": list(shape)})
        result.basis.append(B.tolist())
        log.info("level %d done: loss %.5f", level, final)
    result.u = u_sum
    result.phi = acc
    jd = diffeo.interior(diffeo.jacobian_det(acc))
    result.jacobian = {"min": float(jd.min()), "percent_nonpositive": float(100.0 * np.mean(jd <= 0))}
    result.runtime = time.perf_counter() - t0
    return result

