"""Scaling-and-squaring integration of stationary velocities, composition, Jacobians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid
from .adjoint import Tape, call, define_primitive

__all__ = ["IntegrationConfig", "compose", "scaling_squaring", "jacobian_det", "interior"]


@dataclass
class IntegrationConfig:
    steps: int = 7

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def _compose_fwd(inner, outer):
    if inner.shape != outer.shape:
        raise ValueError(f"field shapes differ: {inner.shape} vs {outer.shape}")
    warped, saved = grid.sample_saving(outer, inner)
    return inner + warped, saved


def _compose_vjp(g, saved):
    g_outer, g_coord = grid.sample_vjp_saved(saved, g)
    return g + g_coord, g_outer


define_primitive("compose", _compose_fwd, _compose_vjp, diff_args=(0, 1))


def compose(inner: np.ndarray, outer: np.ndarray) -> np.ndarray:
    """Displacement of the map ``x -> x + inner(x) + outer(x + inner(x))``."""
    return _compose_fwd(np.asarray(inner, float), np.asarray(outer, float))[0]


def scaling_squaring(velocity, cfg: IntegrationConfig | None = None, tape: Tape | None = None):
    """Exponentiate a stationary velocity field into a displacement field."""
    steps = (cfg or IntegrationConfig()).steps
    u = call(tape, "scale", velocity, c=1.0 / 2**steps)
    for _ in range(steps):
        u = call(tape, "compose", u, u)
    return u


def jacobian_det(phi: np.ndarray) -> np.ndarray:
    """Per-pixel ``det(I + grad phi)`` with central differences."""
    (dxx, dyx) = grid.spatial_gradient(phi[..., 0])
    (dxy, dyy) = grid.spatial_gradient(phi[..., 1])
    return (1.0 + dxx) * (1.0 + dyy) - dyx * dxy


def interior(a: np.ndarray, margin: int = 1) -> np.ndarray:
    """Crop ``margin`` pixels from every side."""
    if margin == 0:
        return a
    return a[margin:-margin, margin:-margin]
