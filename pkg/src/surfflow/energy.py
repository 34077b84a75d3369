"""Self-supervised energy terms with analytic gradients.

Each term returns a :class:`TermGradient` holding its value and the gradient
with respect to the differentiated fields. :func:`total_energy` combines the
bidirectional flow terms, both depth terms and the static and cycle priors.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .geom import SparseRangeMap
from .raster import Sampler, as_field, flow_sampler

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class EnergyWeights:
    lambda_flow: float = 0.9
    lambda_depth: float = 0.1
    lambda_smooth_flow: float = 0.15
    lambda_smooth_depth: float = 0.1
    beta: float = 10.0
    enable_static: bool = True
    enable_cycle: bool = True

    def __post_init__(self):
        for name in ("lambda_flow", "lambda_depth", "lambda_smooth_flow", "lambda_smooth_depth", "beta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")

    def without_priors(self) -> "EnergyWeights":
        return EnergyWeights(**{**asdict(self), "enable_static": False, "enable_cycle": False})


@dataclass(frozen=True)
class TermGradient:
    value: float
    grads: tuple[np.ndarray, ...]

    @property
    def grad(self) -> np.ndarray:
        return self.grads[0]


@dataclass(frozen=True)
class EnergyReport:
    photo: float
    smooth_flow: float
    depth_l1: float
    smooth_depth: float
    static_term: float
    cycle: float
    total: float
    weights: EnergyWeights = field(default_factory=EnergyWeights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


def combine(photo, smooth_flow, depth_l1, smooth_depth, static_term, cycle, w: EnergyWeights) -> float:
    return (
        w.lambda_flow * (photo + w.lambda_smooth_flow * smooth_flow)
        + w.lambda_depth * (depth_l1 + w.lambda_smooth_depth * smooth_depth)
        + static_term
        + cycle
    )


# ---------------------------------------------------------------------------
# 3x3 box filter (valid region) and its adjoint


def box3(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    out = np.zeros((h - 2, w - 2) + x.shape[2:])
    for i in range(3):
        for j in range(3):
            out += x[i : i + h - 2, j : j + w - 2]
    return out / 9.0


def box3_adjoint(g: np.ndarray) -> np.ndarray:
    h, w = g.shape[:2]
    out = np.zeros((h + 2, w + 2) + g.shape[2:])
    g = g / 9.0
    for i in range(3):
        for j in range(3):
            out[i : i + h, j : j + w] += g
    return out


def local_ssim(x: np.ndarray, y: np.ndarray):
    """SSIM map over 3x3 windows plus the pieces needed for its derivative."""
    mx, my = box3(x), box3(y)
    sxx = box3(x * x) - mx * mx
    syy = box3(y * y) - my * my
    sxy = box3(x * y) - mx * my
    a = 2 * mx * my + SSIM_C1
    b = 2 * sxy + SSIM_C2
    c = mx * mx + my * my + SSIM_C1
    d = sxx + syy + SSIM_C2
    return a * b / (c * d), (mx, my, a, b, c, d)


def _ssim_grad_y(x, y, g_map, parts):
    """Pull ``g_map = dL/dSSIM`` back to ``dL/dy``; ``x`` is held fixed."""
    mx, my, a, b, c, d = parts
    cd = c * d
    ds_dmy = 2 * mx * b / cd - a * b * 2 * my / (c * cd)
    ds_dsxy = 2 * a / cd
    ds_dsyy = -a * b / (c * d * d)
    g1 = g_map * (ds_dmy - 2 * my * ds_dsyy - mx * ds_dsxy)
    g2 = g_map * ds_dsyy
    g3 = g_map * ds_dsxy
    return box3_adjoint(g1) + 2 * y * box3_adjoint(g2) + x * box3_adjoint(g3)


def _check_pair(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"{what}: sizes differ, {a.shape[:2]} vs {b.shape[:2]}")


# ---------------------------------------------------------------------------
# individual terms


def photometric_loss(I_t, I_t1, flow, with_grad: bool = True) -> TermGradient:
    """``(1 - mean SSIM(pool(I_t), pool(warp(I_t1, flow)))) / 2``, gradient w.r.t. flow."""
    I_t, I_t1, flow = as_field(I_t), as_field(I_t1), as_field(flow)
    if I_t.shape != I_t1.shape:
        raise ShapeError(f"image shapes differ: {I_t.shape} vs {I_t1.shape}")
    _check_pair(I_t, flow, "photometric_loss")
    sampler = flow_sampler(flow)
    warped = sampler.sample(I_t1)
    x, y = box3(I_t), box3(warped)
    ssim, parts = local_ssim(x, y)
    value = 0.5 * (1.0 - ssim.mean())
    if not with_grad:
        return TermGradient(float(value), ())
    g_map = np.full(ssim.shape, -0.5 / ssim.size)
    g_warped = box3_adjoint(_ssim_grad_y(x, y, g_map, parts))
    du, dv = sampler.grad_position(I_t1)
    grad = np.stack([(g_warped * du).sum(axis=2), (g_warped * dv).sum(axis=2)], axis=2)
    return TermGradient(float(value), (grad,))


def smoothness_loss(fld, image, beta: float = 10.0, with_grad: bool = True) -> TermGradient:
    """Edge-aware first-order smoothness with forward differences."""
    fld, image = as_field(fld), as_field(image)
    _check_pair(fld, image, "smoothness_loss")
    n = fld.size
    dfx = fld[:, 1:] - fld[:, :-1]
    dfy = fld[1:] - fld[:-1]
    wx = np.exp(-beta * np.abs(image[:, 1:] - image[:, :-1]).sum(axis=2, keepdims=True))
    wy = np.exp(-beta * np.abs(image[1:] - image[:-1]).sum(axis=2, keepdims=True))
    value = ((np.abs(dfx) * wx).sum() + (np.abs(dfy) * wy).sum()) / n
    if not with_grad:
        return TermGradient(float(value), ())
    sx = np.sign(dfx) * wx / n
    sy = np.sign(dfy) * wy / n
    grad = np.zeros_like(fld)
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:] += sy
    grad[:-1] -= sy
    return TermGradient(float(value), (grad,))


def depth_loss(depth, supervision: SparseRangeMap, with_grad: bool = True) -> TermGradient:
    """Mean L1 between sampled depth and the valid range pixels, normalised by H*W*C."""
    depth = as_field(depth)
    if depth.shape[:2] != supervision.shape:
        raise ShapeError(f"depth {depth.shape[:2]} and range map {supervision.shape} differ")
    h, w, c = depth.shape
    rows, cols = np.nonzero(supervision.valid)
    if rows.size == 0:
        log.warning("depth_loss: supervision map has no valid pixels")
        return TermGradient(0.0, (np.zeros_like(depth),) if with_grad else ())
    sampler = Sampler(h, w, cols.astype(np.float64), rows.astype(np.float64))
    target = supervision.depth[rows, cols][:, None]
    resid = target - sampler.sample(depth)
    n = depth.size
    value = np.abs(resid).sum() / n
    if not with_grad:
        return TermGradient(float(value), ())
    return TermGradient(float(value), (sampler.adjoint(-np.sign(resid) / n),))


def static_loss(D_t, D_t1, mask, with_grad: bool = True) -> TermGradient:
    """Masked mean of ``|D_t1 - D_t|``; gradients w.r.t. ``(D_t, D_t1)``."""
    D_t, D_t1, mask = as_field(D_t), as_field(D_t1), as_field(mask)
    _check_pair(D_t, D_t1, "static_loss")
    _check_pair(D_t, mask, "static_loss")
    count = mask.sum()
    if count == 0:
        zero = np.zeros_like(D_t)
        return TermGradient(0.0, (zero, zero.copy()) if with_grad else ())
    diff = D_t1 - D_t
    value = (mask * np.abs(diff)).sum() / count
    if not with_grad:
        return TermGradient(float(value), ())
    g = mask * np.sign(diff) / count
    return TermGradient(float(value), (-g, g))


def cycle_loss(O_f, O_b, with_grad: bool = True) -> TermGradient:
    """Mean ``|O_f(p) + O_b(p + O_f(p))|_1``; gradients w.r.t. ``(O_f, O_b)``."""
    O_f, O_b = as_field(O_f), as_field(O_b)
    if O_f.shape != O_b.shape:
        raise ShapeError(f"flow shapes differ: {O_f.shape} vs {O_b.shape}")
    sampler = flow_sampler(O_f)
    resid = O_f + sampler.sample(O_b)
    n = O_f.size
    value = np.abs(resid).sum() / n
    if not with_grad:
        return TermGradient(float(value), ())
    s = np.sign(resid) / n
    du, dv = sampler.grad_position(O_b)
    grad_f = s + np.stack([(s * du).sum(axis=2), (s * dv).sum(axis=2)], axis=2)
    grad_b = sampler.adjoint(s)
    return TermGradient(float(value), (grad_f, grad_b))


# ---------------------------------------------------------------------------
# combined objective


@dataclass
class State:
    O_f: np.ndarray
    O_b: np.ndarray
    D_t: np.ndarray
    D_t1: np.ndarray

    def copy(self) -> "State":
        return State(self.O_f.copy(), self.O_b.copy(), self.D_t.copy(), self.D_t1.copy())


@dataclass
class PairInputs:
    """Grayscale frames and the range maps the optimiser may read."""

    I_t: np.ndarray
    I_t1: np.ndarray
    R_t: SparseRangeMap
    R_t1: SparseRangeMap


def _finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise NumericalError(name)
    return value


def total_energy(
    state: State,
    inputs: PairInputs,
    weights: EnergyWeights = EnergyWeights(),
    mask=None,
    with_grad: bool = True,
) -> tuple[EnergyReport, State | None]:
    """Evaluate the full objective. Returns the report and, optionally, gradients.

    Forward and backward flow terms and the two depth terms are each averaged,
    as is the cycle term over both directions, so that swapping the frames
    swaps the roles of the variables without changing the energy. ``mask`` is
    the static-pixel mask; without it the static term is zero.
    """
    w = weights
    shape = state.O_f.shape[:2]
    for name, arr in (("I_t", inputs.I_t), ("I_t1", inputs.I_t1), ("O_b", state.O_b), ("D_t", state.D_t), ("D_t1", state.D_t1)):
        if as_field(arr).shape[:2] != shape:
            raise ShapeError(f"{name} has size {as_field(arr).shape[:2]}, expected {shape}")

    pf = photometric_loss(inputs.I_t, inputs.I_t1, state.O_f, with_grad)
    pb = photometric_loss(inputs.I_t1, inputs.I_t, state.O_b, with_grad)
    sf = smoothness_loss(state.O_f, inputs.I_t, w.beta, with_grad)
    sb = smoothness_loss(state.O_b, inputs.I_t1, w.beta, with_grad)
    dt = depth_loss(state.D_t, inputs.R_t, with_grad)
    dt1 = depth_loss(state.D_t1, inputs.R_t1, with_grad)
    sdt = smoothness_loss(state.D_t, inputs.I_t, w.beta, with_grad)
    sdt1 = smoothness_loss(state.D_t1, inputs.I_t1, w.beta, with_grad)

    photo = _finite("photo", 0.5 * (pf.value + pb.value))
    smooth_flow = _finite("smooth_flow", 0.5 * (sf.value + sb.value))
    depth_l1 = _finite("depth_l1", 0.5 * (dt.value + dt1.value))
    smooth_depth = _finite("smooth_depth", 0.5 * (sdt.value + sdt1.value))

    st = None
    static_term = 0.0
    if w.enable_static and mask is not None:
        st = static_loss(state.D_t, state.D_t1, mask, with_grad)
        static_term = _finite("static", st.value)
    cf = cb = None
    cycle = 0.0
    if w.enable_cycle:
        cf = cycle_loss(state.O_f, state.O_b, with_grad)
        cb = cycle_loss(state.O_b, state.O_f, with_grad)
        cycle = _finite("cycle", 0.5 * (cf.value + cb.value))

    total = _finite("total", combine(photo, smooth_flow, depth_l1, smooth_depth, static_term, cycle, w))
    report = EnergyReport(photo, smooth_flow, depth_l1, smooth_depth, static_term, cycle, total, w)
    if not with_grad:
        return report, None

    kf = 0.5 * w.lambda_flow
    ksf = kf * w.lambda_smooth_flow
    kd = 0.5 * w.lambda_depth
    ksd = kd * w.lambda_smooth_depth
    g_of = kf * pf.grad + ksf * sf.grad
    g_ob = kf * pb.grad + ksf * sb.grad
    g_dt = kd * dt.grad + ksd * sdt.grad
    g_dt1 = kd * dt1.grad + ksd * sdt1.grad
    if cf is not None:
        # pair the contributions so the sum is symmetric under a frame swap
        g_of = g_of + 0.5 * (cf.grads[0] + cb.grads[1])
        g_ob = g_ob + 0.5 * (cb.grads[0] + cf.grads[1])
    if st is not None:
        g_dt = g_dt + st.grads[0]
        g_dt1 = g_dt1 + st.grads[1]
    grads = State(g_of, g_ob, g_dt, g_dt1)
    for name, g in (("photo/cycle (O_f)", g_of), ("photo/cycle (O_b)", g_ob), ("depth (D_t)", g_dt), ("depth (D_t1)", g_dt1)):
        if not np.all(np.isfinite(g)):
            raise NumericalError(name, f"gradient of {name} is not finite")
    return report, grads
