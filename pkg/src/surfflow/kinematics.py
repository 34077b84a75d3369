"""Temporal smoothing, lifting flow to 3D, speed profiles and cross-sections."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .geom import CalibratedRig, back_project_pixels
from .raster import as_field, backward_warp, flow_sampler, pixel_grid

DEFAULT_LAMBDAS = (0.25, 0.5, 0.25)
DEFAULT_REGION = (-1.0, 1.0, 19.0, 21.0)
DEFAULT_INTERVAL = 0.04


def smooth_flow(O0_f, O0_b, O1_f, O2_f, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    """Constant-velocity blend of the flow at the middle frame of three.

    ``O0_f``/``O0_b`` are the forward and backward flows of the pair (0, 1),
    ``O1_f`` the forward flow of (1, 2) and ``O2_f`` that of (2, 3). The
    previous and next forward flows are carried onto frame 1's pixels and
    averaged with ``O1_f`` using ``lambdas``.
    """
    l0, l1, l2 = (float(x) for x in lambdas)
    if abs(l0 + l1 + l2 - 1.0) > 1e-12:
        raise ConfigError(f"temporal weights must sum to 1, got {l0 + l1 + l2!r}")
    O0_f, O0_b, O1_f, O2_f = (as_field(f) for f in (O0_f, O0_b, O1_f, O2_f))
    if not O0_f.shape == O0_b.shape == O1_f.shape == O2_f.shape:
        raise ShapeError("all four flows must share one shape")
    if (l0, l1, l2) == (0.0, 1.0, 0.0):
        return O1_f.copy()
    prev = backward_warp(O0_f, O0_b)
    nxt = backward_warp(O2_f, O1_f)
    return l0 * prev + l1 * O1_f + l2 * nxt


@dataclass
class SceneFlowFrame:
    """Per-pixel surface points of frame t and their displacement to t+1.

    ``velocity`` is in metres per frame interval. Invalid pixels hold NaN.
    ``static`` optionally marks pixels the solver classified as static.
    """

    points_t: np.ndarray
    velocity: np.ndarray
    valid: np.ndarray
    static: np.ndarray | None = None

    def speed(self, frame_interval: float = DEFAULT_INTERVAL) -> np.ndarray:
        """Per-pixel speed in m/s, NaN where invalid."""
        return np.linalg.norm(self.velocity, axis=-1) / frame_interval


def lift_to_scene_flow(O_f, D_t, D_t1, rig: CalibratedRig, static=None) -> SceneFlowFrame:
    """Back-project both ends of every flow vector and take their difference."""
    O_f, D_t, D_t1 = as_field(O_f), as_field(D_t), as_field(D_t1)
    h, w = O_f.shape[:2]
    if D_t.shape != (h, w, 1) or D_t1.shape != (h, w, 1):
        raise ShapeError("depths must be single-channel and match the flow size")
    u, v = pixel_grid(h, w)
    z0 = D_t[:, :, 0]
    u1 = u + O_f[:, :, 0]
    v1 = v + O_f[:, :, 1]
    z1 = flow_sampler(O_f).sample(D_t1)[:, :, 0]
    inside = (u1 >= 0) & (u1 <= w - 1) & (v1 >= 0) & (v1 <= h - 1)
    valid = inside & (z0 > 0) & (z1 > 0) & np.isfinite(z0) & np.isfinite(z1) & np.isfinite(O_f).all(axis=2)
    with np.errstate(invalid="ignore"):
        p0 = back_project_pixels(u, v, np.where(z0 > 0, z0, np.nan), rig)
        p1 = back_project_pixels(u1, v1, np.where(valid, z1, np.nan), rig)
    velocity = np.where(valid[..., None], p1 - p0, np.nan)
    mask = None if static is None else as_field(static)[:, :, 0] > 0.5
    return SceneFlowFrame(p0, velocity, valid, mask)


def _in_region(points: np.ndarray, region) -> np.ndarray:
    x0, x1, y0, y1 = region
    x, y = points[..., 0], points[..., 1]
    with np.errstate(invalid="ignore"):
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


@dataclass
class SpeedProfile:
    epochs: np.ndarray
    # m/s; NaN marks an epoch with no valid pixels in the region
    speeds: np.ndarray
    region: tuple[float, float, float, float]
    frame_interval: float

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.int64)
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if self.epochs.shape != self.speeds.shape:
            raise ShapeError("epochs and speeds differ in length")

    @property
    def times(self) -> np.ndarray:
        return self.epochs * self.frame_interval

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "time_s", "speed_mps"])
            for e, t, s in zip(self.epochs, self.times, self.speeds):
                out.writerow([int(e), repr(float(t)), "" if np.isnan(s) else repr(float(s))])


def speed_profile(
    frames: Sequence[SceneFlowFrame],
    region=DEFAULT_REGION,
    frame_interval: float = DEFAULT_INTERVAL,
    epochs=None,
    moving_only: bool = False,
) -> SpeedProfile:
    """Mean speed of the valid pixels whose surface point lies in the x-y box.

    The box has no z bounds. With ``moving_only`` the pixels marked static
    in a frame are left out.
    """
    if len(frames) == 0:
        raise ValueError("speed_profile needs at least one frame")
    if frame_interval <= 0:
        raise ConfigError("frame_interval must be positive")
    epochs = np.arange(len(frames)) if epochs is None else np.asarray(epochs)
    speeds = []
    for f in frames:
        sel = f.valid & _in_region(f.points_t, region)
        if moving_only and f.static is not None:
            sel &= ~f.static
        if not sel.any():
            speeds.append(np.nan)
            continue
        speeds.append(float(np.linalg.norm(f.velocity[sel], axis=-1).mean() / frame_interval))
    return SpeedProfile(epochs, np.array(speeds), tuple(float(r) for r in region), float(frame_interval))


def channel_cross_section(frame: SceneFlowFrame, speeds, v_range, bin_width: float = 0.5) -> list[tuple[float, float]]:
    """Speed against LiDAR x for the pixel rows ``v0..v1`` (inclusive), binned in x.

    Returns ``(bin centre, mean speed)`` pairs for non-empty bins, sorted by x.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    h = frame.valid.shape[0]
    v0, v1 = (int(x) for x in v_range)
    if not 0 <= v0 <= v1 < h:
        raise ConfigError(f"row band {v0}..{v1} outside the image height {h}")
    if bin_width <= 0:
        raise ConfigError("bin_width must be positive")
    rows = slice(v0, v1 + 1)
    x = frame.points_t[rows, :, 0]
    s = speeds[rows]
    sel = frame.valid[rows] & np.isfinite(s) & np.isfinite(x)
    if not sel.any():
        return []
    x, s = x[sel], s[sel]
    idx = np.floor(x / bin_width).astype(np.int64)
    keys, inv = np.unique(idx, return_inverse=True)
    total = np.bincount(inv, weights=s)
    count = np.bincount(inv)
    return [((k + 0.5) * bin_width, float(t / c)) for k, t, c in zip(keys, total, count)]


def write_cross_section(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x_m", "speed_mps"])
        for x, s in rows:
            out.writerow([repr(float(x)), repr(float(s))])
