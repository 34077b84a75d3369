"""Coarse-to-fine minimisation of the pair energy over flow and depth fields."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .energy import (
    EnergyReport,
    EnergyWeights,
    PairInputs,
    State,
    combine,
    depth_loss,
    smoothness_loss,
    static_loss,
    total_energy,
)
from .errors import ConfigError, ConvergenceError, ShapeError
from .geom import (
    CalibratedRig,
    PointCloud,
    SparseRangeMap,
    downsample_cloud,
    pool_range_map,
    rasterize_range_map,
)
from .raster import as_field, backward_warp, build_pyramid, downsample2, upsample2, upsample_flow

log = logging.getLogger(__name__)

SCALE_POWER = 2

@dataclass(frozen=True)
class SolverConfig:
    levels: int = 5
    iters_per_level: int = 200
    init_step_flow: float = 0.5
    step_halvings_max: int = 20
    eps_static: float = 0.5
    eta: float = 0.5
    seed: int = 0
    # fraction of each level's iterations run without the static and cycle terms
    warmup_fraction: float = 0.25
    # iterations between static-mask updates; the objective is fixed within a block
    mask_every: int = 10
    prior_depth: float = 20.0
    min_depth: float = 1e-3
    # primal-dual depth steps per solver iteration
    depth_inner_steps: int = 5
    # descend along the multi-scale smoothed gradient instead of the raw one
    multiscale: bool = True
    weights: EnergyWeights = field(default_factory=EnergyWeights)

    def __post_init__(self):
        if self.levels < 1 or self.iters_per_level < 1:
            raise ConfigError("levels and iters_per_level must be at least 1")
        if not self.eps_static > 0:
            raise ConfigError("eps_static must be positive")
        if not 0 < self.eta <= 1:
            raise ConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if self.init_step_flow <= 0:
            raise ConfigError("init_step_flow must be positive")
        if self.depth_inner_steps < 1:
            raise ConfigError("depth_inner_steps must be at least 1")
        if self.mask_every < 1 or self.step_halvings_max < 0:
            raise ConfigError("mask_every must be >= 1 and step_halvings_max >= 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TraceEntry:
    level: int
    block: int
    iteration: int
    total: float


@dataclass
class PairEstimate:
    O_f: np.ndarray
    O_b: np.ndarray
    D_t: np.ndarray
    D_t1: np.ndarray
    mask: np.ndarray
    report: EnergyReport
    energy_trace: list[TraceEntry]
    epochs: tuple[int, int] = (0, 1)


def to_gray(image) -> np.ndarray:
    image = as_field(image)
    if image.shape[2] == 1:
        return image
    if image.shape[2] == 3:
        return (image @ np.array([0.299, 0.587, 0.114]))[:, :, None]
    return image.mean(axis=2, keepdims=True)


def nearest_fill(range_map: SparseRangeMap) -> np.ndarray:
    """Copy each pixel's depth from its Euclidean-nearest valid pixel."""
    if not range_map.valid.any():
        raise ValueError("range map has no valid pixels")
    _, (rows, cols) = ndimage.distance_transform_edt(~range_map.valid, return_indices=True)
    return range_map.depth[rows, cols]


def init_depth(range_map: SparseRangeMap, prior_depth: float = 20.0) -> np.ndarray:
    """Dense positive starting depth: nearest-valid fill, then one down/up blur pass."""
    h, w = range_map.shape
    if not range_map.valid.any():
        return np.full((h, w, 1), float(prior_depth))
    filled = as_field(nearest_fill(range_map))
    if h % 2 == 0 and w % 2 == 0 and h > 1 and w > 1:
        filled = upsample2(downsample2(filled))
    return filled


def motion_segment(O_f, eps: float) -> np.ndarray:
    """Static mask, 1 where the flow magnitude is below ``eps`` pixels."""
    if not eps > 0:
        raise ConfigError("eps must be positive")
    O_f = as_field(O_f)
    mag = np.sqrt(O_f[:, :, 0] ** 2 + O_f[:, :, 1] ** 2)
    return (mag < eps).astype(np.float64)[:, :, None]


def _pair_mask(state: State, eps: float) -> np.ndarray:
    # both directions must look static, which keeps the mask swap-symmetric
    return motion_segment(state.O_f, eps) * motion_segment(state.O_b, eps)


def smoothed_gradient(g: np.ndarray) -> np.ndarray:
    """Multi-scale smoothing ``sum_s B_s B_s g`` of a gradient field.

    ``B_s`` is a zero-padded box filter of width ``s``, so every summand is
    symmetric positive semi-definite and the result stays a descent direction.
    Neighbouring pixels move together, which keeps steps from breaking the
    exact ties of the L1 smoothness terms.
    """
    h, w = g.shape[:2]
    out = g.copy()
    size = 3
    while size <= max(h, w):
        for c in range(g.shape[2]):
            once = ndimage.uniform_filter(g[:, :, c], size, mode="constant")
            out[:, :, c] += size**SCALE_POWER * ndimage.uniform_filter(once, size, mode="constant")
        size = 2 * size + 1
    return out


def _depth_parts(D_t, D_t1, inputs: PairInputs, weights: EnergyWeights, mask) -> dict:
    """Values of the depth-dependent terms, as they enter the report."""
    static_term = 0.0
    if weights.enable_static and mask is not None:
        static_term = static_loss(D_t, D_t1, mask, with_grad=False).value
    return dict(
        depth_l1=0.5 * (depth_loss(D_t, inputs.R_t, False).value + depth_loss(D_t1, inputs.R_t1, False).value),
        smooth_depth=0.5
        * (
            smoothness_loss(D_t, inputs.I_t, weights.beta, False).value
            + smoothness_loss(D_t1, inputs.I_t1, weights.beta, False).value
        ),
        static_term=static_term,
    )


def _with_depth_terms(report: EnergyReport, depth_parts: dict, weights: EnergyWeights) -> EnergyReport:
    """``report`` with its depth-dependent terms replaced."""
    parts = dict(
        photo=report.photo,
        smooth_flow=report.smooth_flow,
        cycle=report.cycle,
        **depth_parts,
    )
    return EnergyReport(**parts, total=combine(**parts, w=weights), weights=weights)


class DepthPrimalDual:
    """Primal-dual iterations on the depth terms of the energy.

    With the static mask fixed, the depth part of the objective is a sum of
    weighted L1 norms of linear maps of ``(D_t, D_t1)``: sparse data fit,
    edge-aware forward differences and the masked frame difference. Each
    step is a diagonally preconditioned Chambolle-Pock update, which
    converges to a minimiser where plain subgradient steps stall on the
    L1 kinks. The objective is rescaled by ``H*W / (lambda_depth / 2)`` so
    that the data duals live in ``[-1, 1]`` and primal steps are in metres.
    """

    def __init__(self, D_t, D_t1, inputs: PairInputs, min_depth: float):
        self.min_depth = min_depth
        self.x = [as_field(D_t)[:, :, 0].copy(), as_field(D_t1)[:, :, 0].copy()]
        self.xbar = [x.copy() for x in self.x]
        self.images = [inputs.I_t, inputs.I_t1]
        self.valid = [inputs.R_t.valid, inputs.R_t1.valid]
        self.target = [inputs.R_t.depth[inputs.R_t.valid], inputs.R_t1.depth[inputs.R_t1.valid]]
        h, w = self.x[0].shape
        self.q = [np.zeros(t.size) for t in self.target]
        self.px = [np.zeros((h, w - 1)) for _ in range(2)]
        self.py = [np.zeros((h - 1, w)) for _ in range(2)]
        self.r = np.zeros((h, w))
        # number of nonzeros per primal column, excluding the static rows
        degree = np.zeros((h, w))
        degree[:, :-1] += 1
        degree[:, 1:] += 1
        degree[:-1] += 1
        degree[1:] += 1
        self.degree = [degree + v for v in self.valid]
        self.configure(EnergyWeights().without_priors(), None)

    def configure(self, weights: EnergyWeights, mask) -> None:
        """Set the objective for a block; duals are clipped to the new bounds."""
        h, w = self.x[0].shape
        kd = 0.5 * weights.lambda_depth
        self.bx, self.by = [], []
        for k, image in enumerate(self.images):
            ex = np.exp(-weights.beta * np.abs(np.diff(image, axis=1)).sum(axis=2))
            ey = np.exp(-weights.beta * np.abs(np.diff(image, axis=0)).sum(axis=2))
            self.bx.append(weights.lambda_smooth_depth * ex)
            self.by.append(weights.lambda_smooth_depth * ey)
            self.px[k] = np.clip(self.px[k], -self.bx[k], self.bx[k])
            self.py[k] = np.clip(self.py[k], -self.by[k], self.by[k])
        m = np.zeros((h, w))
        if weights.enable_static and mask is not None and mask.sum() > 0:
            m = as_field(mask)[:, :, 0] * (h * w) / (mask.sum() * kd)
        self.br = m
        self.r = np.clip(self.r, -m, m)
        on = (m > 0).astype(np.float64)
        self.tau = [1.0 / np.maximum(d + on, 1.0) for d in self.degree]

    def step(self) -> None:
        for k in range(2):
            xb = self.xbar[k]
            self.px[k] = np.clip(self.px[k] + 0.5 * np.diff(xb, axis=1), -self.bx[k], self.bx[k])
            self.py[k] = np.clip(self.py[k] + 0.5 * np.diff(xb, axis=0), -self.by[k], self.by[k])
            self.q[k] = np.clip(self.q[k] + xb[self.valid[k]] - self.target[k], -1.0, 1.0)
        self.r = np.clip(self.r + 0.5 * (self.xbar[1] - self.xbar[0]), -self.br, self.br)
        for k in range(2):
            kt = np.zeros_like(self.x[k])
            kt[:, :-1] -= self.px[k]
            kt[:, 1:] += self.px[k]
            kt[:-1] -= self.py[k]
            kt[1:] += self.py[k]
            kt[self.valid[k]] += self.q[k]
            kt += self.r if k == 1 else -self.r
            new = np.maximum(self.x[k] - self.tau[k] * kt, self.min_depth)
            self.xbar[k] = 2.0 * new - self.x[k]
            self.x[k] = new

    def depths(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[0][:, :, None].copy(), self.x[1][:, :, None].copy()


def _flow_direction(g_f, g_b, multiscale: bool):
    if multiscale:
        g_f, g_b = smoothed_gradient(g_f), smoothed_gradient(g_b)
    peak = max(np.abs(g_f).max(), np.abs(g_b).max())
    if peak == 0:
        return None
    return g_f / peak, g_b / peak


def consistency_projection(O_f, O_b) -> tuple[np.ndarray, np.ndarray]:
    """Average each flow with the negated other flow carried onto its grid.

    Independent errors of the two directions partly cancel and the cycle
    residual drops to second order, which gradient steps on the L1 cycle
    term cannot achieve because its subgradient is a per-pixel sign pattern.
    """
    return 0.5 * (O_f - backward_warp(O_b, O_f)), 0.5 * (O_b - backward_warp(O_f, O_b))


def _optimize_level(
    state: State,
    inputs: PairInputs,
    cfg: SolverConfig,
    level: int,
    warmup_iters: int,
    trace: list[TraceEntry],
    first_level: bool,
) -> tuple[State, EnergyReport, np.ndarray]:
    """Alternate a flow line search with primal-dual depth proposals.

    With the mask held fixed the energy splits into flow terms and depth
    terms. Flows take a step-halving search along the smoothed gradient;
    depths run a few primal-dual steps, and the iterate is adopted only
    when it lowers the total. Either way the trace never increases within
    a block.
    """
    eps = cfg.eps_static / 2**level
    alpha = 1.0
    block = -1
    active = None
    report = grads = mask = None
    flow_stalled = False
    warm_weights = cfg.weights.without_priors()
    pd = DepthPrimalDual(state.D_t, state.D_t1, inputs, cfg.min_depth)
    for it in range(cfg.iters_per_level):
        weights = warm_weights if it < warmup_iters else cfg.weights
        if it % cfg.mask_every == 0 or weights is not active:
            active = weights
            block += 1
            mask = _pair_mask(state, eps)
            report, grads = total_energy(state, inputs, active, mask)
            trace.append(TraceEntry(level, block, it, report.total))
            pd.configure(active, mask)
            flow_stalled = False

        improved = False
        flow_failed = False
        if not flow_stalled:
            direction = _flow_direction(grads.O_f, grads.O_b, cfg.multiscale)
            flow_stalled = direction is None
            for _ in range(cfg.step_halvings_max + 1):
                if direction is None:
                    break
                step = alpha * cfg.init_step_flow
                O_f, O_b = state.O_f - step * direction[0], state.O_b - step * direction[1]
                if active.enable_cycle:
                    O_f, O_b = consistency_projection(O_f, O_b)
                trial = State(O_f, O_b, state.D_t, state.D_t1)
                t_report, t_grads = total_energy(trial, inputs, active, mask)
                if t_report.total < report.total:
                    state, report, grads = trial, t_report, t_grads
                    alpha = min(1.0, 2.0 * alpha)
                    improved = True
                    break
                alpha *= 0.5
            else:
                flow_failed = flow_stalled = True
                alpha = 1.0

        if active.enable_cycle:
            O_f, O_b = consistency_projection(state.O_f, state.O_b)
            trial = State(O_f, O_b, state.D_t, state.D_t1)
            t_report, t_grads = total_energy(trial, inputs, active, mask)
            if t_report.total < report.total:
                state, report, grads = trial, t_report, t_grads
                improved = True
                flow_stalled = False

        for _ in range(cfg.depth_inner_steps):
            pd.step()
        D_t, D_t1 = pd.depths()
        candidate = _with_depth_terms(report, _depth_parts(D_t, D_t1, inputs, active, mask), active)
        if candidate.total < report.total:
            state = State(state.O_f, state.O_b, D_t, D_t1)
            report = candidate
            improved = True

        if improved:
            trace.append(TraceEntry(level, block, it + 1, report.total))
        elif flow_failed and first_level and it == 0 and report.total > 0:
            raise ConvergenceError("line search underflow on the first iteration", trace=list(trace))

    # report the full objective at the final state, priors included
    mask = _pair_mask(state, eps)
    report, _ = total_energy(state, inputs, cfg.weights, mask, with_grad=False)
    return state, report, mask


def solve_pair(I_t, I_t1, R_t: SparseRangeMap, R_t1: SparseRangeMap, cfg: SolverConfig = SolverConfig(), epochs=(0, 1)) -> PairEstimate:
    """Optimise flows and depths given the range maps the optimiser is allowed to read."""
    I_t, I_t1 = to_gray(I_t), to_gray(I_t1)
    if I_t.shape != I_t1.shape or I_t.shape[:2] != R_t.shape or R_t.shape != R_t1.shape:
        raise ShapeError("images and range maps must share one size")
    pyr_t = build_pyramid(I_t, cfg.levels)
    pyr_t1 = build_pyramid(I_t1, cfg.levels)
    coarsest = cfg.levels - 1
    trace: list[TraceEntry] = []

    state = None
    for level in range(coarsest, -1, -1):
        factor = 2**level
        inputs = PairInputs(pyr_t[level], pyr_t1[level], pool_range_map(R_t, factor), pool_range_map(R_t1, factor))
        h, w = pyr_t[level].shape[:2]
        if state is None:
            state = State(
                np.zeros((h, w, 2)),
                np.zeros((h, w, 2)),
                init_depth(inputs.R_t, cfg.prior_depth),
                init_depth(inputs.R_t1, cfg.prior_depth),
            )
        else:
            state = State(
                upsample_flow(state.O_f),
                upsample_flow(state.O_b),
                np.maximum(upsample2(state.D_t), cfg.min_depth),
                np.maximum(upsample2(state.D_t1), cfg.min_depth),
            )
        warmup = int(cfg.warmup_fraction * cfg.iters_per_level)
        state, report, mask = _optimize_level(state, inputs, cfg, level, warmup, trace, level == coarsest)
        log.debug("level %d (%dx%d): total %.6g", level, w, h, report.total)

    for name in ("O_f", "O_b", "D_t", "D_t1"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise ConvergenceError(f"non-finite {name} in final estimate", trace=trace)
    return PairEstimate(state.O_f, state.O_b, state.D_t, state.D_t1, mask, report, trace, tuple(epochs))


def cloud_seed(seed: int, epoch: int) -> list[int]:
    """Downsampling seed tied to the cloud itself, so swapped inputs sample identically."""
    return [int(seed), int(epoch)]


def input_range_map(cloud: PointCloud, rig: CalibratedRig, cfg: SolverConfig) -> SparseRangeMap:
    """Range map of the eta-downsampled cloud: the only LiDAR data the optimiser reads."""
    return rasterize_range_map(downsample_cloud(cloud, cfg.eta, cloud_seed(cfg.seed, cloud.epoch)), rig)


def estimate_pair(I_t, I_t1, cloud_t: PointCloud, cloud_t1: PointCloud, rig: CalibratedRig, cfg: SolverConfig = SolverConfig()) -> PairEstimate:
    """Flows and depths for one frame pair.

    Both clouds are downsampled with ratio ``cfg.eta`` before rasterisation;
    the removed points are left for evaluation and never reach the optimiser.
    """
    R_t = input_range_map(cloud_t, rig, cfg)
    R_t1 = input_range_map(cloud_t1, rig, cfg)
    return solve_pair(I_t, I_t1, R_t, R_t1, cfg, epochs=(cloud_t.epoch, cloud_t1.epoch))
