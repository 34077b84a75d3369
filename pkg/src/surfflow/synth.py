"""Synthetic camera-LiDAR scenes with known flow, depth and surface speed.

The scene is a textured ground plane seen by a camera pitched down at it.
Two motion models are available:

``translation``
    The texture lives in image space and shifts by a constant number of
    pixels per frame, so the true flow is that constant everywhere.
``surface``
    The texture lives on the plane and slides along the LiDAR y axis
    (down the channel) with a per-frame speed schedule. The cross-channel
    profile is uniform, or parabolic inside ``channel_half_width`` with
    static banks outside it.

LiDAR returns are a random subset of pixel centres lifted with the true
depth, redrawn for every frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .geom import CalibratedRig, PointCloud, back_project_pixels, project_points
from .raster import pixel_grid

MAX_DEPTH = 100.0


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 160
    focal: float = 200.0
    # camera depth of the ground at the bottom and top of the centre column
    near: float = 10.0
    far: float = 50.0
    # lateral tilt of the ground plane, dz/dx in the LiDAR frame
    cross_slope: float = 0.0
    # camera centre in the LiDAR frame, metres
    camera_offset: tuple[float, float, float] = (0.1, 0.0, 0.05)
    motion: str = "translation"
    translation: tuple[float, float] = (0.0, 0.0)
    # (number of frame intervals, speed in m/s) segments for surface motion
    speed_schedule: tuple[tuple[int, float], ...] = ((1, 0.0),)
    profile: str = "uniform"
    channel_half_width: float | None = None
    frames: int = 2
    frame_interval: float = 0.04
    lidar_fraction: float = 0.1
    image_noise: float = 0.0
    depth_noise: float = 0.0
    # Gaussian texture scale: pixels for translation, metres for surface motion
    texture_scale: float = 1.5
    supersample: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8 or self.focal <= 0:
            raise ConfigError("image must be at least 8x8 with positive focal length")
        if not 0 < self.near < self.far <= MAX_DEPTH:
            raise ConfigError(f"need 0 < near < far <= {MAX_DEPTH}")
        if self.motion not in ("translation", "surface"):
            raise ConfigError(f"unknown motion model {self.motion!r}")
        if self.profile not in ("uniform", "parabolic"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.frames < 1 or self.frame_interval <= 0:
            raise ConfigError("frames must be >= 1 and frame_interval positive")
        if not 0 <= self.lidar_fraction <= 1:
            raise ConfigError("lidar_fraction must lie in [0, 1]")
        if self.image_noise < 0 or self.depth_noise < 0 or self.texture_scale <= 0 or self.supersample < 1:
            raise ConfigError("noise levels must be >= 0, texture_scale > 0, supersample >= 1")
        if self.motion == "surface" and sum(n for n, _ in self.speed_schedule) < self.frames - 1:
            raise ConfigError("speed schedule is shorter than the sequence")

    def speeds(self) -> np.ndarray:
        """Surface speed (m/s) for each of the ``frames - 1`` intervals."""
        if self.motion != "surface":
            return np.zeros(max(self.frames - 1, 0))
        out = [v for n, v in self.speed_schedule for _ in range(n)]
        return np.asarray(out[: self.frames - 1], dtype=np.float64)


@dataclass
class SynthScene:
    spec: SceneSpec
    rig: CalibratedRig
    images: list[np.ndarray]
    clouds: list[PointCloud]
    gt_flow: list[np.ndarray]
    gt_depth: list[np.ndarray]
    # LiDAR-frame surface point behind every pixel (static geometry)
    points: np.ndarray
    # true 3D velocity (m/s) of the surface at every pixel, per interval
    gt_velocity: list[np.ndarray] = field(default_factory=list)

    @property
    def gt_speed_schedule(self) -> np.ndarray:
        return self.spec.speeds()

    def region_speed(self, region, interval: int) -> float:
        """Mean true speed (m/s) over pixels whose surface point lies in ``region``."""
        x0, x1, y0, y1 = region
        p = self.points
        inside = (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)
        if not inside.any():
            return float("nan")
        return float(np.linalg.norm(self.gt_velocity[interval], axis=-1)[inside].mean())


def make_rig(spec: SceneSpec) -> CalibratedRig:
    """Camera pitched down so the centre column spans ``near`` to ``far``."""
    px = (spec.width - 1) / 2.0
    py = (spec.height - 1) / 2.0
    a_top = (0.0 - py) / spec.focal
    a_bot = (spec.height - 1 - py) / spec.focal
    r = spec.far / spec.near
    pitch = np.arctan2(a_bot - r * a_top, r - 1.0)
    # camera axes expressed in the LiDAR frame (x right, y forward, z up)
    cam_x = np.array([1.0, 0.0, 0.0])
    cam_z = np.array([0.0, np.cos(pitch), -np.sin(pitch)])
    cam_y = np.cross(cam_z, cam_x)
    R = np.stack([cam_x, cam_y, cam_z])
    t = -R @ np.asarray(spec.camera_offset, dtype=np.float64)
    return CalibratedRig(spec.focal, spec.focal, px, py, R, t, spec.width, spec.height)


def _ground_height(spec: SceneSpec, rig: CalibratedRig) -> float:
    """Plane offset so the bottom centre pixel sees the ground at depth ``near``."""
    centre = -rig.R.T @ rig.t
    ray = rig.R.T @ np.array([0.0, (spec.height - 1 - rig.py) / rig.fy, 1.0])
    hit = centre + spec.near * ray
    return hit[2] - spec.cross_slope * hit[0]


def intersect_plane(u, v, spec: SceneSpec, rig: CalibratedRig) -> tuple[np.ndarray, np.ndarray]:
    """Camera depth and LiDAR-frame point where pixel rays meet the ground."""
    z0 = _ground_height(spec, rig)
    centre = -rig.R.T @ rig.t
    d_cam = np.stack([(u - rig.px) / rig.fx, (v - rig.py) / rig.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ rig.R
    n = np.array([-spec.cross_slope, 0.0, 1.0])
    denom = d @ n
    with np.errstate(divide="ignore"):
        depth = (z0 - centre @ n) / denom
    if np.any(~(depth > 0)) or np.any(depth > MAX_DEPTH):
        raise ConfigError("ground plane leaves the (0, 100] m depth range inside the image")
    return depth, centre + depth[..., None] * d


class _Texture:
    """Band-limited noise on a regular grid, sampled with cubic splines."""

    def __init__(self, rng, lo, hi, scale: float, cells_per_scale: float = 3.0):
        self.cell = scale / cells_per_scale
        self.lo = np.asarray(lo, dtype=np.float64)
        shape = tuple(int(np.ceil((h - l) / self.cell)) + 8 for l, h in zip(lo, hi))
        fine = ndimage.gaussian_filter(rng.standard_normal(shape), cells_per_scale, mode="wrap")
        coarse = ndimage.gaussian_filter(rng.standard_normal(shape), 4 * cells_per_scale, mode="wrap")
        grid = 0.5 + 0.12 * fine / fine.std() + 0.06 * coarse / coarse.std()
        self.coeffs = ndimage.spline_filter(np.clip(grid, 0.02, 0.98), order=3)

    def __call__(self, a, b) -> np.ndarray:
        ia = (a - self.lo[0]) / self.cell + 4
        ib = (b - self.lo[1]) / self.cell + 4
        return ndimage.map_coordinates(self.coeffs, [ia, ib], order=3, prefilter=False, mode="nearest")


def _offsets(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n - 0.5


def _profile(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    if spec.channel_half_width is None:
        return np.ones_like(x)
    w = spec.channel_half_width
    if spec.profile == "parabolic":
        return np.clip(1.0 - (x / w) ** 2, 0.0, None)
    return (np.abs(x) <= w).astype(np.float64)


def generate(spec: SceneSpec) -> SynthScene:
    rng = np.random.default_rng(spec.seed)
    rig = make_rig(spec)
    h, w = spec.height, spec.width
    u, v = pixel_grid(h, w)
    depth, points = intersect_plane(u, v, spec, rig)
    speeds = spec.speeds()
    shifts = np.concatenate([[0.0], np.cumsum(speeds * spec.frame_interval)])
    offs = _offsets(spec.supersample)

    if spec.motion == "translation":
        d = np.asarray(spec.translation, dtype=np.float64)
        span = np.abs(d) * (spec.frames - 1) + 4
        tex = _Texture(rng, (-span[0], -span[1]), (w + span[0], h + span[1]), spec.texture_scale)

        def render(frame):
            acc = np.zeros((h, w))
            for dy in offs:
                for dx in offs:
                    acc += tex(u + dx - frame * d[0], v + dy - frame * d[1])
            return acc / spec.supersample**2

        flows = [np.broadcast_to(d, (h, w, 2)).copy() for _ in range(spec.frames - 1)]
        velocities = [np.zeros((h, w, 3)) for _ in range(spec.frames - 1)]
    else:
        # extents of the visible ground, padded for sub-pixel samples and advection
        corners_u = np.array([-1.0, w, -1.0, w])
        corners_v = np.array([-1.0, -1.0, h, h])
        _, cp = intersect_plane(corners_u, corners_v, spec, rig)
        pad = 4 * spec.texture_scale
        lo = (cp[:, 0].min() - pad, cp[:, 1].min() - shifts[-1] - pad)
        hi = (cp[:, 0].max() + pad, cp[:, 1].max() + pad)
        tex = _Texture(rng, lo, hi, spec.texture_scale)

        def render(frame):
            acc = np.zeros((h, w))
            for dy in offs:
                for dx in offs:
                    _, p = intersect_plane(u + dx, v + dy, spec, rig)
                    acc += tex(p[..., 0], p[..., 1] - shifts[frame] * _profile(spec, p[..., 0]))
            return acc / spec.supersample**2

        prof = _profile(spec, points[..., 0])
        flows, velocities = [], []
        for k in range(spec.frames - 1):
            moved = points.copy()
            moved[..., 1] += speeds[k] * spec.frame_interval * prof
            uv, _ = project_points(moved.reshape(-1, 3), rig)
            flows.append(uv.reshape(h, w, 2) - np.stack([u, v], axis=-1))
            vel = np.zeros((h, w, 3))
            vel[..., 1] = speeds[k] * prof
            velocities.append(vel)

    images = []
    for k in range(spec.frames):
        img = render(k)
        if spec.image_noise > 0:
            img = img + spec.image_noise * rng.standard_normal(img.shape)
        images.append(np.clip(img, 0.0, 1.0))

    clouds = []
    n_pix = h * w
    n_pts = int(round(spec.lidar_fraction * n_pix))
    for k in range(spec.frames):
        idx = np.sort(rng.choice(n_pix, size=n_pts, replace=False))
        rows, cols = np.divmod(idx, w)
        z = depth[rows, cols]
        if spec.depth_noise > 0:
            z = z + spec.depth_noise * rng.standard_normal(z.shape)
        pts = back_project_pixels(cols.astype(np.float64), rows.astype(np.float64), z, rig)
        clouds.append(PointCloud(pts, epoch=k))

    gt_depth = [depth[:, :, None].copy() for _ in range(spec.frames)]
    return SynthScene(spec, rig, images, clouds, flows, gt_depth, points, velocities)
