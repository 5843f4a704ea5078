"""Dense 2D grids: sampling, warping, finite differences and Gaussian smoothing.

Conventions used throughout the package:

* images are ``(H, W)`` float64 arrays with values in ``[0, 1]``;
* vector fields are ``(H, W, 2)`` arrays in pixel units, ``[..., 0]`` is the
  displacement along columns (x) and ``[..., 1]`` along rows (y);
* coefficient fields are ``(H, W, m)`` arrays;
* the origin is the top-left pixel centre and displacements are added to the
  sampling location (pull warp): ``out(x) = img(x + u(x))``.

Sampling clamps coordinates to the grid (clamp-to-edge); blurring uses
half-sample symmetric reflection.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy import ndimage

__all__ = [
    "GaussianKernel1D",
    "gaussian_kernel",
    "gaussian_blur",
    "bilinear_sample",
    "sample",
    "sample_vjp",
    "sample_saving",
    "sample_vjp_saved",
    "warp",
    "spatial_gradient",
    "spatial_gradient_adjoint",
    "pixel_grid",
    "check_field",
]


class GaussianKernel1D:
    """Normalized 1D Gaussian taps truncated at ``ceil(3 * sigma)``."""

    def __init__(self, sigma: float):
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.radius = int(math.ceil(3.0 * self.sigma))
        k = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        w = np.exp(-(k**2) / (2.0 * self.sigma**2))
        self.weights = w / w.sum()

    def __repr__(self) -> str:
        return f"GaussianKernel1D(sigma={self.sigma}, radius={self.radius})"


def gaussian_kernel(sigma: float) -> np.ndarray:
    return GaussianKernel1D(sigma).weights


def gaussian_blur(f: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect boundaries, per channel.

    ``f`` is ``(H, W)`` or ``(H, W, C)``. ``sigma == 0`` returns ``f`` itself.
    The operator is symmetric, so it is its own adjoint.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return f
    w = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(f, dtype=np.float64), w, axis=1, mode="reflect")
    return ndimage.correlate1d(out, w, axis=0, mode="reflect")


def pixel_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(xs, ys)`` column and row index grids of the given shape."""
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def check_field(u: np.ndarray, shape: tuple[int, int], name: str = "field") -> None:
    if u.ndim != 3 or u.shape[:2] != tuple(shape) or u.shape[2] != 2:
        raise ValueError(f"{name} has shape {u.shape}, expected {tuple(shape) + (2,)}")


@numba.njit(cache=True)
def _cell(v, n):
    """Clamp ``v`` to ``[0, n-1]``; return lower index, upper index, fraction, inside flag."""
    inside = 0.0 <= v <= n - 1.0
    vc = min(max(v, 0.0), n - 1.0)
    i0 = min(int(math.floor(vc)), max(n - 2, 0))
    i1 = min(i0 + 1, n - 1)
    return i0, i1, vc - i0, inside


@numba.njit(cache=True)
def _bilinear_fwd(img, x, y):
    h, w, c = img.shape
    out = np.empty((x.size, c))
    for n in range(x.size):
        x0, x1, fx, _ = _cell(x[n], w)
        y0, y1, fy, _ = _cell(y[n], h)
        for k in range(c):
            a = img[y0, x0, k]
            b = img[y0, x1, k]
            cc = img[y1, x0, k]
            d = img[y1, x1, k]
            top = a + fx * (b - a)
            bot = cc + fx * (d - cc)
            out[n, k] = top + fy * (bot - top)
    return out


@numba.njit(cache=True)
def _bilinear_vjp(img, x, y, g):
    h, w, c = img.shape
    g_img = np.zeros((h, w, c))
    gx = np.zeros(x.size)
    gy = np.zeros(x.size)
    for n in range(x.size):
        x0, x1, fx, in_x = _cell(x[n], w)
        y0, y1, fy, in_y = _cell(y[n], h)
        for k in range(c):
            gk = g[n, k]
            g_img[y0, x0, k] += (1.0 - fx) * (1.0 - fy) * gk
            g_img[y0, x1, k] += fx * (1.0 - fy) * gk
            g_img[y1, x0, k] += (1.0 - fx) * fy * gk
            g_img[y1, x1, k] += fx * fy * gk
            a = img[y0, x0, k]
            b = img[y0, x1, k]
            cc = img[y1, x0, k]
            d = img[y1, x1, k]
            # the coordinate derivative vanishes where the clamp is active
            if in_x:
                gx[n] += gk * ((1.0 - fy) * (b - a) + fy * (d - cc))
            if in_y:
                gy[n] += gk * ((1.0 - fx) * (cc - a) + fx * (d - b))
    return g_img, gx, gy


def _as3(img: np.ndarray) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _flat(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).ravel()


def bilinear_sample(img: np.ndarray, x, y):
    """Bilinear interpolation at real coordinates ``(x, y)`` with clamp-to-edge.

    ``x`` and ``y`` may be scalars or arrays of matching shape.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot sample an empty image")
    xa, ya = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    out = _bilinear_fwd(_as3(img), _flat(xa), _flat(ya)).reshape(xa.shape + img.shape[2:])
    if out.ndim == 0:
        return float(out)
    return out


def sample(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample ``img`` (scalar or multi-channel) at ``x + u(x)`` for every pixel."""
    return sample_saving(img, u)[0]


def sample_saving(img: np.ndarray, u: np.ndarray):
    """:func:`sample` that also returns what :func:`sample_vjp_saved` needs."""
    xs, ys = pixel_grid(u.shape[:2])
    x = _flat(xs + u[..., 0])
    y = _flat(ys + u[..., 1])
    img3 = _as3(img)
    out = _bilinear_fwd(img3, x, y).reshape(u.shape[:2] + img.shape[2:])
    return out, (img3, x, y, img.ndim, u.shape[:2])


def sample_vjp_saved(saved, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img3, x, y, ndim, shape = saved
    g_img, gx, gy = _bilinear_vjp(img3, x, y, np.ascontiguousarray(g, dtype=np.float64).reshape(x.size, -1))
    gu = np.stack([gx, gy], axis=-1).reshape(shape + (2,))
    return (g_img if ndim == 3 else g_img[..., 0]), gu


def sample_vjp(img: np.ndarray, u: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of :func:`sample` with respect to ``img`` and ``u``."""
    return sample_vjp_saved(sample_saving(img, u)[1], g)


def warp(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Backward (pull) warp: ``out(x) = img(x + u(x))``."""
    if img.shape[:2] != u.shape[:2]:
        raise ValueError(f"image shape {img.shape[:2]} does not match field shape {u.shape[:2]}")
    check_field(u, img.shape[:2], "displacement")
    return sample(img, u)


def _diff_axis(f: np.ndarray, axis: int) -> np.ndarray:
    return np.gradient(f, axis=axis, edge_order=1)


def _diff_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    out[2:] += 0.5 * g[1:-1]
    out[:-2] -= 0.5 * g[1:-1]
    out[1] += g[0]
    out[0] -= g[0]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, axis)


def spatial_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(df/dx, df/dy)``: central differences inside, one-sided at borders.

    Works per channel for ``(H, W, C)`` inputs.
    """
    if f.shape[0] < 2 or f.shape[1] < 2:
        raise ValueError(f"spatial_gradient needs at least 2x2 pixels, got {f.shape[:2]}")
    return _diff_axis(f, 1), _diff_axis(f, 0)


def spatial_gradient_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return _diff_axis_adjoint(gx, 1) + _diff_axis_adjoint(gy, 0)
