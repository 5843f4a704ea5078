"""Synthetic thin-vessel image pairs and landmark / dense-flow metrics.

Vessels are smooth random curves a few pixels wide on a dark background, the
regime where the displacement exceeds the width of the structure and flat
regions carry no local evidence. The moving image is rendered analytically
through the inverse deformation, so ``warp(moving, gt_flow) ~ fixed`` up to
interpolation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import grid

__all__ = [
    "SynthSpec",
    "SynthPair",
    "LandmarkSet",
    "synth_pair",
    "invert_displacement",
    "evaluation_mask",
    "tre",
    "auc_at",
    "endpoint_error",
    "default_benchmark_specs",
]


@dataclass
class SynthSpec:
    """Generator settings; the defaults define the shipped benchmark.

    For ``deformation="smooth"`` the flow is a blurred-noise field with peak
    magnitude ``max_magnitude`` plus a global shift of length ``shift`` in a
    seed-dependent direction plus ``translation``. For
    ``deformation="translation"`` the flow is exactly ``translation``.
    """

    size: int = 256
    vessel_count: int = 5
    vessel_width: float = 4.0
    vessel_shape: str = "polyline"  # "curve" | "polyline" | "grid"
    background: float = 0.05
    vessel_level: float = 0.9
    deformation: str = "smooth"  # "translation" | "smooth"
    translation: tuple[float, float] = (0.0, 0.0)
    shift: float = 10.0
    max_magnitude: float = 2.0
    smoothness: float = 32.0
    noise_std: float = 0.002
    landmark_count: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.size < 16:
            raise ValueError("size: must be >= 16")
        if self.vessel_count < 1:
            raise ValueError("vessel_count: must be >= 1")
        if self.vessel_width < 1:
            raise ValueError("vessel_width: must be >= 1")
        if self.vessel_shape not in ("curve", "polyline", "grid"):
            raise ValueError(f"vessel_shape: unknown kind {self.vessel_shape!r}")
        if self.deformation not in ("translation", "smooth"):
            raise ValueError(f"deformation: unknown kind {self.deformation!r}")
        if self.max_magnitude < 0:
            raise ValueError("max_magnitude: must be >= 0")
        if self.shift < 0:
            raise ValueError("shift: must be >= 0")
        if len(self.translation) != 2:
            raise ValueError("translation: must have two components")
        if self.smoothness <= 0:
            raise ValueError("smoothness: must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std: must be >= 0")
        if self.landmark_count < 1:
            raise ValueError("landmark_count: must be >= 1")
        if not 0 <= self.background <= 1 or not 0 <= self.vessel_level <= 1:
            raise ValueError("background/vessel_level: must lie in [0, 1]")


@dataclass
class LandmarkSet:
    """Rows of ``(x_fixed, y_fixed, x_moving, y_moving)`` in pixels."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self):
        return len(self.points)

    @property
    def fixed(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def moving(self) -> np.ndarray:
        return self.points[:, 2:]


@dataclass
class SynthPair:
    fixed: np.ndarray
    moving: np.ndarray
    gt_flow: np.ndarray
    landmarks: LandmarkSet
    centerline: np.ndarray = field(repr=False)
    spec: SynthSpec = None

    def __iter__(self):
        # unpacks as (fixed, moving, gt_flow, landmarks)
        return iter((self.fixed, self.moving, self.gt_flow, self.landmarks))


def _random_curve(rng: np.random.Generator, size: int, step: float = 0.25) -> np.ndarray:
    """A smooth curve crossing the image: random start and heading, slowly varying curvature."""
    margin = 0.15 * size
    start = rng.uniform(margin, size - margin, 2)
    heading = rng.uniform(0, 2 * np.pi)
    freqs = rng.uniform(0.5, 3.0, 3) / size
    phases = rng.uniform(0, 2 * np.pi, 3)
    amps = rng.uniform(-1.0, 1.0, 3) * 2.5 / size * np.pi

    def walk(direction):
        pts = [start]
        h = heading if direction > 0 else heading + np.pi
        s = 0.0
        pos = start.copy()
        while -4 <= pos[0] <= size + 3 and -4 <= pos[1] <= size + 3 and s < 4 * size:
            kappa = float(np.sum(amps * np.sin(2 * np.pi * freqs * s + phases)))
            h += direction * kappa * step
            pos = pos + step * np.array([np.cos(h), np.sin(h)])
            pts.append(pos)
            s += step
        return np.array(pts)

    fwd = walk(+1)
    bwd = walk(-1)
    return np.concatenate([bwd[::-1], fwd[1:]], axis=0)


def _random_polyline(rng: np.random.Generator, size: int, step: float = 0.25) -> np.ndarray:
    """Straight segments through a few random interior vertices, extended past both borders."""
    n_vert = int(rng.integers(2, 5))
    margin = 0.1 * size
    verts = rng.uniform(margin, size - margin, (n_vert, 2))
    # order the vertices along a random direction so the path does not fold back
    d = np.array([np.cos(a := rng.uniform(0, np.pi)), np.sin(a)])
    verts = verts[np.argsort(verts @ d)]
    ext = 1.5 * size
    head = verts[0] - ext * _unit(verts[1] - verts[0])
    tail = verts[-1] + ext * _unit(verts[-1] - verts[-2])
    verts = np.concatenate([head[None], verts, tail[None]])
    pts = []
    for a0, a1 in zip(verts[:-1], verts[1:]):
        n = max(int(np.ceil(np.linalg.norm(a1 - a0) / step)), 1)
        pts.append(a0 + np.linspace(0.0, 1.0, n, endpoint=False)[:, None] * (a1 - a0))
    pts.append(verts[-1:])
    pts = np.concatenate(pts)
    keep = np.all((pts >= -4) & (pts <= size + 3), axis=1)
    return pts[keep]


def _grid_lines(rng: np.random.Generator, size: int, count: int, step: float = 0.25) -> list[np.ndarray]:
    """Axis-aligned lines, alternating horizontal and vertical, at random offsets."""
    t = np.arange(-4.0, size + 3.0, step)
    lines = []
    for i in range(count):
        c = rng.uniform(0.1 * size, 0.9 * size)
        line = np.stack([t, np.full_like(t, c)], axis=1)
        lines.append(line if i % 2 == 0 else line[:, ::-1])
    return lines


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _render(tree: cKDTree, xs: np.ndarray, ys: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Anti-aliased vessel intensity at arbitrary points (1 px linear edge ramp)."""
    d, _ = tree.query(np.stack([xs.ravel(), ys.ravel()], axis=1))
    cover = np.clip(spec.vessel_width / 2.0 + 0.5 - d, 0.0, 1.0).reshape(xs.shape)
    return spec.background + (spec.vessel_level - spec.background) * cover


def _smooth_field(rng: np.random.Generator, size: int, spec: SynthSpec) -> np.ndarray:
    if spec.deformation == "translation":
        tx, ty = spec.translation
        flow = np.empty((size, size, 2))
        flow[..., 0], flow[..., 1] = tx, ty
        return flow
    noise = rng.standard_normal((size, size, 2))
    flow = grid.gaussian_blur(noise, spec.smoothness)
    mag = np.sqrt(np.sum(flow**2, axis=-1)).max()
    if mag > 0:
        flow *= spec.max_magnitude / mag
    angle = rng.uniform(0.0, 2.0 * np.pi)
    flow[..., 0] += spec.translation[0] + spec.shift * np.cos(angle)
    flow[..., 1] += spec.translation[1] + spec.shift * np.sin(angle)
    return flow


def invert_displacement(flow: np.ndarray, iterations: int = 50) -> np.ndarray:
    """Fixed-point inverse ``w(y) = -flow(y + w(y))`` of a smooth displacement."""
    inv = -flow.copy()
    for _ in range(iterations):
        inv = -grid.sample(flow, inv)
    return inv


def synth_pair(spec: SynthSpec) -> SynthPair:
    """Render a fixed/moving vessel pair with its ground-truth pull displacement.

    ``gt_flow`` maps fixed pixels to moving positions:
    ``moving(x + gt_flow(x)) = fixed(x)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    if spec.vessel_shape == "grid":
        curves = _grid_lines(rng, n, spec.vessel_count)
    else:
        make = _random_curve if spec.vessel_shape == "curve" else _random_polyline
        curves = [make(rng, n) for _ in range(spec.vessel_count)]
    center = np.concatenate(curves, axis=0)
    tree = cKDTree(center)
    xs, ys = grid.pixel_grid((n, n))
    fixed = _render(tree, xs, ys, spec)
    flow = _smooth_field(rng, n, spec)
    if np.any(flow):
        inv = -flow if spec.deformation == "translation" else invert_displacement(flow)
        moving = _render(tree, xs + inv[..., 0], ys + inv[..., 1], spec)
    else:
        moving = fixed.copy()

    # landmarks on centerline points whose correspondences stay inside the image
    lo, hi = 8.0, n - 9.0
    inside = np.all((center >= lo) & (center <= hi), axis=1)
    cand = center[inside]
    mv = cand + grid.bilinear_sample(flow, cand[:, 0], cand[:, 1])
    ok = np.all((mv >= 0) & (mv <= n - 1), axis=1)
    cand, mv = cand[ok], mv[ok]
    pick = np.sort(rng.choice(len(cand), size=min(spec.landmark_count, len(cand)), replace=False))
    landmarks = LandmarkSet(np.concatenate([cand[pick], mv[pick]], axis=1))

    if spec.noise_std > 0:
        fixed = np.clip(fixed + rng.normal(0, spec.noise_std, fixed.shape), 0.0, 1.0)
        moving = np.clip(moving + rng.normal(0, spec.noise_std, moving.shape), 0.0, 1.0)
    return SynthPair(fixed, moving, flow, landmarks, center, spec)


def evaluation_mask(pair: SynthPair, dilation: float = 10.0, border: int = 16) -> np.ndarray:
    """Fixed-image vessel mask dilated by ``dilation`` px, minus a border band.

    The border band drops pixels whose moving correspondence may lie
    outside the field of view.
    """
    n = pair.fixed.shape[0]
    tree = cKDTree(pair.centerline)
    xs, ys = grid.pixel_grid(pair.fixed.shape)
    d, _ = tree.query(np.stack([xs.ravel(), ys.ravel()], axis=1))
    mask = (d <= pair.spec.vessel_width / 2.0 + dilation).reshape(pair.fixed.shape)
    if border > 0:
        mask[:border] = mask[-border:] = False
        mask[:, :border] = mask[:, -border:] = False
    return mask


def tre(landmarks: LandmarkSet, phi: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-landmark and mean target registration error of a pull displacement."""
    if len(landmarks) == 0:
        raise ValueError("landmark set is empty")
    pts = landmarks.fixed
    h, w = phi.shape[:2]
    if np.any(pts < 0) or np.any(pts[:, 0] > w - 1) or np.any(pts[:, 1] > h - 1):
        raise ValueError("fixed landmarks must lie inside the image")
    disp = grid.bilinear_sample(phi, pts[:, 0], pts[:, 1])
    err = np.linalg.norm(pts + disp - landmarks.moving, axis=1)
    return err, float(err.mean())


def auc_at(tres, threshold: int) -> float:
    """Area under the success-rate curve at integer thresholds ``1..T``, in [0, 1]."""
    tres = np.asarray(tres, dtype=np.float64).ravel()
    if tres.size == 0:
        raise ValueError("empty TRE list")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    ts = np.arange(1, int(threshold) + 1)
    return float(np.mean([np.mean(tres <= t) for t in ts]))


def endpoint_error(u: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    if u.shape != gt.shape:
        raise ValueError(f"field shapes differ: {u.shape} vs {gt.shape}")
    err = np.linalg.norm(u - gt, axis=-1)
    if mask is not None:
        err = err[mask]
    return float(err.mean())


def default_benchmark_specs(n_pairs: int = 8, size: int = 256, seed: int = 0) -> list[SynthSpec]:
    """The shipped benchmark: straight-segment vessels, 10 px shift plus up to 2 px local motion."""
    return [SynthSpec(size=size, seed=seed + i) for i in range(n_pairs)]
