"""Evaluation metrics for flow and depth estimates."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .energy import SSIM_C1, SSIM_C2
from .errors import ShapeError
from .geom import CalibratedRig, PointCloud, project_points
from .raster import as_field, bilinear_sample

DEPTH_BANDS = (10.0, 30.0, 50.0)


def _same(a, b, name):
    a, b = as_field(a), as_field(b)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")
    return a, b


def rmsd(I, I_rec) -> float:
    """Root-mean-square difference over all pixels and channels."""
    I, I_rec = _same(I, I_rec, "rmsd")
    return float(np.sqrt(np.mean((I - I_rec) ** 2)))


def census_transform(image, eps: float = 0.04) -> np.ndarray:
    """Ternary signature of every interior pixel against its 8 neighbours.

    Entry is -1 where the neighbour is brighter by at least ``eps``, +1 where
    it is darker by at least ``eps`` and 0 otherwise. Shape ``(H-2, W-2, C, 8)``.
    """
    image = as_field(image)
    h, w, _ = image.shape
    centre = image[1:-1, 1:-1]
    out = []
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if du == 0 and dv == 0:
                continue
            nb = image[1 + dv : h - 1 + dv, 1 + du : w - 1 + du]
            ct = np.zeros(centre.shape, dtype=np.int8)
            ct[nb - centre >= eps] = -1
            ct[centre - nb >= eps] = 1
            out.append(ct)
    return np.stack(out, axis=-1)


def census_loss(I, I_rec, eps: float = 0.04) -> float:
    """Fraction of census entries that differ, averaged over interior pixels."""
    I, I_rec = _same(I, I_rec, "census_loss")
    if I.shape[0] < 3 or I.shape[1] < 3:
        return 0.0
    return float(np.mean(census_transform(I, eps) != census_transform(I_rec, eps)))


def ssim_index(x, y) -> float:
    """Single-window SSIM over the whole image."""
    x, y = _same(x, y, "ssim_index")
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cxy = ((x - mx) * (y - my)).mean()
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(num / den)


def endpoint_error(flow, gt_flow, tau: float = 1.0, mask=None) -> tuple[float, float]:
    """Mean L2 flow error and the fraction of pixels with error below ``tau``."""
    flow, gt_flow = _same(flow, gt_flow, "endpoint_error")
    err = np.linalg.norm(flow - gt_flow, axis=2)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(err.mean()), float(np.mean(err < tau))


@dataclass
class DepthEvalReport:
    # None marks a band with no ground-truth points
    mae10: float | None
    mae30: float | None
    mae50: float | None
    abs_rel: float | None
    n10: int
    n30: int
    n50: int

    def to_dict(self) -> dict:
        return asdict(self)


def depth_errors(depth, gt_cloud: PointCloud, rig: CalibratedRig):
    """Per-point ``(range from the LiDAR origin, true camera depth, predicted depth)``.

    Points behind the camera or projecting outside the image are dropped.
    """
    depth = as_field(depth)
    if depth.shape[:2] != rig.shape:
        raise ShapeError(f"depth {depth.shape[:2]} does not match the rig {rig.shape}")
    pts = gt_cloud.points
    uv, z = project_points(pts, rig)
    h, w = rig.shape
    keep = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    pred = bilinear_sample(depth, (uv[keep, 0], uv[keep, 1]))[:, 0]
    return np.linalg.norm(pts[keep], axis=1), z[keep], pred


def depth_eval(depth, gt_cloud: PointCloud, rig: CalibratedRig) -> DepthEvalReport:
    """MAE within 10/30/50 m of the LiDAR and Abs.Rel. (percent) within 50 m."""
    dist, z, pred = depth_errors(depth, gt_cloud, rig)
    err = np.abs(pred - z)
    maes, counts = [], []
    for r in DEPTH_BANDS:
        sel = dist <= r
        counts.append(int(sel.sum()))
        maes.append(float(err[sel].mean()) if sel.any() else None)
    sel = dist <= DEPTH_BANDS[-1]
    abs_rel = float(100.0 * np.mean(err[sel] / z[sel])) if sel.any() else None
    return DepthEvalReport(maes[0], maes[1], maes[2], abs_rel, *counts)
