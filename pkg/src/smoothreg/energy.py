"""Outer-loop loss: negative local NCC plus a diffusive penalty on the flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import grid
from .adjoint import Tape, call, define_primitive

__all__ = ["LossConfig", "lncc", "lncc_map", "diffusive_reg", "total_loss", "level_window"]


@dataclass
class LossConfig:
    lncc_window: int = 9
    lam: float = 1.0
    variance_floor: float = 1e-5

    def __post_init__(self):
        if self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError(f"lncc_window must be odd and >= 3, got {self.lncc_window}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")


def level_window(window: int, level: int) -> int:
    """Window halved ``level`` times, rounded to the nearest odd integer >= 3."""
    w = window / 2.0**level
    odd = 2 * int(np.floor((w - 1) / 2.0 + 0.5)) + 1
    return max(3, odd)


def _box(f: np.ndarray, window: int) -> np.ndarray:
    return ndimage.uniform_filter(f, size=window, mode="reflect")


def _lncc_parts(a: np.ndarray, b: np.ndarray, window: int, floor: float):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if window % 2 == 0:
        raise ValueError("window must be odd")
    ma, mb = _box(a, window), _box(b, window)
    sab = _box(a * b, window) - ma * mb
    saa = _box(a * a, window) - ma * ma
    sbb = _box(b * b, window) - mb * mb
    va, vb = np.maximum(saa, floor), np.maximum(sbb, floor)
    cc = sab / np.sqrt(va * vb)
    return cc, (a, b, ma, mb, sab, saa, sbb, va, vb, cc)


def lncc_map(a: np.ndarray, b: np.ndarray, window: int = 9, variance_floor: float = 1e-5) -> np.ndarray:
    """Per-pixel windowed Pearson correlation (variances floored)."""
    return _lncc_parts(a, b, window, variance_floor)[0]


def _lncc_fwd(a, b, window=9, variance_floor=1e-5):
    cc, saved = _lncc_parts(a, b, window, variance_floor)
    return cc.mean(), saved


def _lncc_vjp(g, saved, window=9, variance_floor=1e-5):
    a, b, ma, mb, sab, saa, sbb, va, vb, cc = saved
    gcc = g / cc.size
    d_sab = gcc / np.sqrt(va * vb)
    d_saa = np.where(saa > variance_floor, -0.5 * gcc * cc / va, 0.0)
    d_sbb = np.where(sbb > variance_floor, -0.5 * gcc * cc / vb, 0.0)
    box_ab = _box(d_sab, window)
    box_aa = _box(d_saa, window)
    box_bb = _box(d_sbb, window)
    d_ma = -d_sab * mb - 2.0 * ma * d_saa
    d_mb = -d_sab * ma - 2.0 * mb * d_sbb
    ga = b * box_ab + 2.0 * a * box_aa + _box(d_ma, window)
    gb = a * box_ab + 2.0 * b * box_bb + _box(d_mb, window)
    return ga, gb


define_primitive("lncc", _lncc_fwd, _lncc_vjp, diff_args=(0, 1))


def lncc(a: np.ndarray, b: np.ndarray, window: int = 9, variance_floor: float = 1e-5) -> float:
    """Mean local normalized cross-correlation of two images, in [-1, 1]."""
    return float(_lncc_fwd(np.asarray(a, float), np.asarray(b, float), window, variance_floor)[0])


def _reg_fwd(u):
    gx, gy = grid.spatial_gradient(u)
    return float(np.mean(np.sum(gx**2 + gy**2, axis=-1))), (gx, gy, u.shape[0] * u.shape[1])


def _reg_vjp(g, saved):
    gx, gy, n = saved
    c = 2.0 * g / n
    return (grid.spatial_gradient_adjoint(c * gx, c * gy),)


define_primitive("diffusive_reg", _reg_fwd, _reg_vjp)


def diffusive_reg(u: np.ndarray) -> float:
    """Mean over pixels of ``|grad dx|^2 + |grad dy|^2``."""
    return _reg_fwd(np.asarray(u, dtype=np.float64))[0]


def total_loss(fixed, moving, phi, u, cfg: LossConfig, tape: Tape | None = None, window: int | None = None):
    """``-lncc(fixed, warp(moving, phi)) + lam * diffusive_reg(u)``.

    With a tape, ``phi`` and ``u`` may be traced values and a traced scalar is
    returned; otherwise a float.
    """
    window = cfg.lncc_window if window is None else window
    warped = call(tape, "warp", moving, phi)
    sim = call(tape, "lncc", fixed, warped, window=window, variance_floor=cfg.variance_floor)
    reg = call(tape, "diffusive_reg", u)
    loss = call(tape, "sub", call(tape, "scale", reg, c=cfg.lam), sim)
    return loss if tape is not None else float(loss)
