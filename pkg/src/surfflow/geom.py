"""Pinhole camera model, LiDAR to camera transforms and sparse range maps.

Pixel coordinates are ``(u, v)`` = (column, row) with integer values at pixel
centres. The camera frame has x right, y down and z along the optical axis;
a LiDAR point ``P`` maps to the camera as ``R @ P + t``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BehindCameraError, ConfigError, InvalidDepthError, ShapeError

MIN_CAMERA_DEPTH = 1e-9
CLOUD_MAGIC = b"DPC1"


@dataclass(frozen=True, eq=False)
class CalibratedRig:
    fx: float
    fy: float
    px: float
    py: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.px < self.width and 0 <= self.py < self.height):
            raise ConfigError("principal point outside the image")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ConfigError("R is not a proper rotation")
        if not np.all(np.isfinite(t)):
            raise ConfigError("translation must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def cropped(self, x0: int, y0: int, width: int, height: int) -> "CalibratedRig":
        """Rig for the sub-image starting at column ``x0``, row ``y0``."""
        return CalibratedRig(self.fx, self.fy, self.px - x0, self.py - y0, self.R, self.t, width, height)

    def scaled(self, factor: float) -> "CalibratedRig":
        """Rig for an image resampled by ``factor`` with pixel-centre alignment."""
        width = int(round(self.width * factor))
        height = int(round(self.height * factor))
        return CalibratedRig(
            self.fx * factor,
            self.fy * factor,
            (self.px + 0.5) * factor - 0.5,
            (self.py + 0.5) * factor - 0.5,
            self.R,
            self.t,
            width,
            height,
        )

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "px": float(self.px),
            "py": float(self.py),
            "R": [float(x) for x in self.R.ravel()],
            "t": [float(x) for x in self.t],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedRig":
        try:
            return cls(
                float(d["fx"]),
                float(d["fy"]),
                float(d["px"]),
                float(d["py"]),
                np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                np.asarray(d["t"], dtype=np.float64),
                int(d["width"]),
                int(d["height"]),
            )
        except KeyError as exc:
            raise ConfigError(f"calibration is missing key {exc}") from None


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    epoch: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class SparseRangeMap:
    depth: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = depth > 0 if self.valid is None else np.asarray(self.valid, dtype=bool)
        if depth.shape != valid.shape or depth.ndim != 2:
            raise ShapeError("depth and valid must be matching 2-D rasters")
        depth = np.where(valid, depth, 0.0)
        if np.any(~np.isfinite(depth[valid])) or np.any(depth[valid] <= 0):
            raise ValueError("valid range pixels must hold finite positive depths")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "SparseRangeMap":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))


def project_points(points: np.ndarray, rig: CalibratedRig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(uv, z_cam)``; no behind-camera check."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # elementwise in a fixed order, so results do not depend on the BLAS build
    R = rig.R
    cam = pts[:, 0:1] * R[:, 0] + pts[:, 1:2] * R[:, 1] + pts[:, 2:3] * R[:, 2] + rig.t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = rig.fx * cam[:, 0] / z + rig.px
        v = rig.fy * cam[:, 1] / z + rig.py
    return np.stack([u, v], axis=1), z


def project(point, rig: CalibratedRig) -> tuple[tuple[float, float], float]:
    """Project one LiDAR-frame point to ``((u, v), z_cam)``."""
    uv, z = project_points(np.asarray(point, dtype=np.float64), rig)
    if not z[0] > MIN_CAMERA_DEPTH:
        raise BehindCameraError(f"point {tuple(point)} has camera depth {z[0]:.3g}")
    return (float(uv[0, 0]), float(uv[0, 1])), float(z[0])


def back_project_pixels(u, v, z, rig: CalibratedRig) -> np.ndarray:
    """Vectorised ``P = z R^T K^-1 p - R^T t``; output shape ``u.shape + (3,)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    cam = np.stack(
        [z * (u - rig.px) / rig.fx, z * (v - rig.py) / rig.fy, np.broadcast_to(z, np.broadcast(u, v, z).shape)],
        axis=-1,
    )
    return (cam - rig.t) @ rig.R


def back_project(pixel, z: float, rig: CalibratedRig) -> np.ndarray:
    """Lift pixel ``(u, v)`` at camera depth ``z`` to a LiDAR-frame point."""
    if not z > 0:
        raise InvalidDepthError(f"depth must be positive, got {z}")
    return back_project_pixels(pixel[0], pixel[1], z, rig)


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def rasterize_range_map(cloud: PointCloud, rig: CalibratedRig) -> SparseRangeMap:
    """Splat points onto their nearest pixel; the smallest camera depth wins."""
    h, w = rig.shape
    buf = np.full(h * w, np.inf)
    if len(cloud):
        uv, z = project_points(cloud.points, rig)
        front = z > MIN_CAMERA_DEPTH
        ui = round_half_up(np.where(front, uv[:, 0], -1.0))
        vi = round_half_up(np.where(front, uv[:, 1], -1.0))
        keep = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        np.minimum.at(buf, vi[keep] * w + ui[keep], z[keep])
    valid = np.isfinite(buf)
    depth = np.where(valid, buf, 0.0)
    return SparseRangeMap(depth.reshape(h, w), valid.reshape(h, w))


def _sample_indices(n: int, eta: float, seed) -> np.ndarray:
    if not (0 < eta <= 1):
        raise ConfigError(f"downsampling ratio must lie in (0, 1], got {eta}")
    k = int(np.floor(eta * n + 0.5))
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def downsample_cloud(cloud: PointCloud, eta: float, seed: int | Sequence[int]) -> PointCloud:
    """Uniform sample without replacement of ``round(eta * n)`` points, order kept."""
    idx = _sample_indices(len(cloud), eta, seed)
    return PointCloud(cloud.points[idx], cloud.epoch)


def holdout_split(cloud: PointCloud, eta: float, seed) -> tuple[PointCloud, PointCloud]:
    """``(kept, held_out)`` where ``kept`` equals ``downsample_cloud`` with the same seed."""
    idx = _sample_indices(len(cloud), eta, seed)
    mask = np.zeros(len(cloud), dtype=bool)
    mask[idx] = True
    return PointCloud(cloud.points[mask], cloud.epoch), PointCloud(cloud.points[~mask], cloud.epoch)


def pool_range_map(rmap: SparseRangeMap, factor: int) -> SparseRangeMap:
    """Validity-weighted block mean over ``factor`` x ``factor`` blocks."""
    if factor == 1:
        return rmap
    h, w = rmap.shape
    if h % factor or w % factor:
        raise ShapeError(f"range map {w}x{h} is not divisible by {factor}")
    shape = (h // factor, factor, w // factor, factor)
    total = rmap.depth.reshape(shape).sum(axis=(1, 3))
    count = rmap.valid.reshape(shape).sum(axis=(1, 3))
    valid = count > 0
    depth = np.divide(total, count, out=np.zeros_like(total), where=valid)
    return SparseRangeMap(depth, valid)


# ---------------------------------------------------------------------------
# file formats


def load_calibration(path) -> CalibratedRig:
    with open(path) as fh:
        return CalibratedRig.from_dict(json.load(fh))


def save_calibration(rig: CalibratedRig, path) -> None:
    with open(path, "w") as fh:
        json.dump(rig.to_dict(), fh, indent=2)
        fh.write("\n")


def write_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z"])
            writer.writerows(cloud.points.tolist())
        return
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(cloud.points.astype("<f4").tobytes())


def read_cloud(path, epoch: int = 0) -> PointCloud:
    """Read a ``DPC1`` binary cloud, or a CSV file with header ``x,y,z``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [c.strip() for c in next(reader)]
            if header != ["x", "y", "z"]:
                raise ValueError(f"{path}: expected header x,y,z, got {header}")
            rows = [[float(c) for c in row] for row in reader if row]
        return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), epoch)
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: not a DPC1 point cloud")
    (count,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 12 * count:
        raise ValueError(f"{path}: expected {count} points, file size is {len(data)} bytes")
    pts = np.frombuffer(data, dtype="<f4", offset=8).reshape(count, 3)
    return PointCloud(pts.astype(np.float64), epoch)
