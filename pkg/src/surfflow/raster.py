"""Dense rasters: bilinear sampling, backward warping and image pyramids.

A field is a float64 array of shape ``(H, W, C)``. Flow fields carry two
channels ``(du, dv)`` in pixels along columns and rows respectively.
Sampling outside the image clamps coordinates to the nearest edge.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError

FIELD_MAGIC = b"DFLO"


def as_field(a) -> np.ndarray:
    """View ``a`` as a float64 ``(H, W, C)`` field (2-D input gains C=1)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"field must be 2-D or 3-D, got shape {a.shape}")
    return a


class Sampler:
    """Bilinear lookup at fixed positions, reusable across fields of one size.

    Holds the corner indices and weights so that sampling, the derivative of
    the sample with respect to the position, and the adjoint scatter can all
    share one setup.
    """

    def __init__(self, height: int, width: int, u, v):
        self.height, self.width = height, width
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        self.shape = np.broadcast(u, v).shape
        u = np.broadcast_to(u, self.shape).ravel()
        v = np.broadcast_to(v, self.shape).ravel()
        uc = np.clip(u, 0.0, width - 1)
        vc = np.clip(v, 0.0, height - 1)
        x0 = np.clip(np.floor(uc), 0, max(width - 2, 0)).astype(np.int64)
        y0 = np.clip(np.floor(vc), 0, max(height - 2, 0)).astype(np.int64)
        x1 = np.minimum(x0 + 1, width - 1)
        y1 = np.minimum(y0 + 1, height - 1)
        self.fx = uc - x0
        self.fy = vc - y0
        # derivative w.r.t. position vanishes where the coordinate was clamped
        self.in_u = ((u >= 0) & (u <= width - 1)).astype(np.float64)
        self.in_v = ((v >= 0) & (v <= height - 1)).astype(np.float64)
        self.i00 = y0 * width + x0
        self.i01 = y0 * width + x1
        self.i10 = y1 * width + x0
        self.i11 = y1 * width + x1
        gx, gy = 1.0 - self.fx, 1.0 - self.fy
        self.w00 = gx * gy
        self.w01 = self.fx * gy
        self.w10 = gx * self.fy
        self.w11 = self.fx * self.fy

    def _corners(self, field):
        flat = field.reshape(self.height * self.width, -1)
        return flat[self.i00], flat[self.i01], flat[self.i10], flat[self.i11]

    def sample(self, field: np.ndarray) -> np.ndarray:
        field = as_field(field)
        f00, f01, f10, f11 = self._corners(field)
        # weighted form: a unit weight reproduces the stored value bitwise
        out = (
            self.w00[:, None] * f00
            + self.w01[:, None] * f01
            + self.w10[:, None] * f10
            + self.w11[:, None] * f11
        )
        return out.reshape(self.shape + (field.shape[2],))

    def grad_position(self, field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Partial derivatives of :meth:`sample` w.r.t. ``u`` and ``v``."""
        field = as_field(field)
        f00, f01, f10, f11 = self._corners(field)
        fx = self.fx[:, None]
        fy = self.fy[:, None]
        du = ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10)) * self.in_u[:, None]
        dv = ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01)) * self.in_v[:, None]
        c = field.shape[2]
        return du.reshape(self.shape + (c,)), dv.reshape(self.shape + (c,))

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Scatter ``g`` (shape ``self.shape + (C,)``) back onto the source grid."""
        g = np.asarray(g, dtype=np.float64)
        c = g.shape[-1]
        g = g.reshape(-1, c)
        n = self.height * self.width
        idx = np.concatenate([self.i00, self.i01, self.i10, self.i11])
        w = np.concatenate([self.w00, self.w01, self.w10, self.w11])
        out = np.empty((n, c))
        for k in range(c):
            gk = np.tile(g[:, k], 4)
            out[:, k] = np.bincount(idx, weights=w * gk, minlength=n)
        return out.reshape(self.height, self.width, c)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate rasters, each ``(H, W)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def bilinear_sample(field, position) -> np.ndarray:
    """Sample ``field`` at ``position = (u, v)``; scalars give a C-vector."""
    field = as_field(field)
    h, w, _ = field.shape
    return Sampler(h, w, position[0], position[1]).sample(field)


def flow_sampler(flow: np.ndarray) -> Sampler:
    flow = as_field(flow)
    if flow.shape[2] != 2:
        raise ShapeError(f"flow must have 2 channels, got {flow.shape[2]}")
    h, w, _ = flow.shape
    u, v = pixel_grid(h, w)
    return Sampler(h, w, u + flow[:, :, 0], v + flow[:, :, 1])


def backward_warp(field, flow) -> np.ndarray:
    """``out(p) = field(p + flow(p))`` with bilinear interpolation."""
    field = as_field(field)
    flow = as_field(flow)
    if field.shape[:2] != flow.shape[:2]:
        raise ShapeError(f"field {field.shape[:2]} and flow {flow.shape[:2]} differ in size")
    return flow_sampler(flow).sample(field)


def downsample2(field) -> np.ndarray:
    """2x2 box mean."""
    field = as_field(field)
    h, w, c = field.shape
    if h % 2 or w % 2:
        raise ShapeError(f"cannot halve a {w}x{h} field")
    return field.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def build_pyramid(field, levels: int = 5) -> list[np.ndarray]:
    """Level 0 is the input; level k is the k-fold 2x2 box mean."""
    field = as_field(field)
    h, w, _ = field.shape
    step = 2 ** (levels - 1)
    if levels < 1 or h % step or w % step:
        raise ShapeError(f"{w}x{h} is not divisible by {step}; crop the input first")
    out = [field]
    for _ in range(levels - 1):
        out.append(downsample2(out[-1]))
    return out


def upsample2(field) -> np.ndarray:
    """Bilinear 2x upsampling with pixel-centre alignment."""
    field = as_field(field)
    h, w, _ = field.shape
    v, u = np.mgrid[0 : 2 * h, 0 : 2 * w].astype(np.float64)
    return Sampler(h, w, (u + 0.5) / 2 - 0.5, (v + 0.5) / 2 - 0.5).sample(field)


def upsample_flow(flow) -> np.ndarray:
    """Upsample a flow field by 2 and double its pixel displacements."""
    return 2.0 * upsample2(flow)


# ---------------------------------------------------------------------------
# DFLO raster files


def write_field(field, path) -> None:
    field = as_field(field)
    h, w, c = field.shape
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(field, dtype="<f4").tobytes())


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a DFLO raster")
    w, h, c = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * w * h * c:
        raise ValueError(f"{path}: truncated raster ({w}x{h}x{c})")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float64)
