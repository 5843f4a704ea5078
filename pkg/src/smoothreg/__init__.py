"""Coarse-to-fine deformable 2D registration with an unrolled basis-coefficient smoothing layer."""

from . import adjoint, diffeo, energy, grid, smoothproper  # noqa: F401  (registers primitives)

__version__ = "0.1.0"
