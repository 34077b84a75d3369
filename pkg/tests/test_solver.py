import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surfflow import solver
from surfflow.errors import ConfigError, NumericalError, ShapeError
from surfflow.geom import PointCloud, SparseRangeMap, downsample_cloud, holdout_split, rasterize_range_map
from surfflow.solver import (
    SolverConfig,
    cloud_seed,
    consistency_projection,
    estimate_pair,
    init_depth,
    input_range_map,
    motion_segment,
    nearest_fill,
    smoothed_gradient,
    solve_pair,
)
from surfflow.synth import SceneSpec, generate

SMALL = SceneSpec(width=64, height=48, focal=60.0, near=8.0, far=30.0, translation=(1.0, -0.5), lidar_fraction=0.3)
FAST = SolverConfig(levels=3, iters_per_level=30)


@pytest.fixture(scope="module")
def scene():
    return generate(SMALL)


@pytest.fixture(scope="module")
def estimate(scene):
    return estimate_pair(scene.images[0], scene.images[1], scene.clouds[0], scene.clouds[1], scene.rig, FAST)


@pytest.mark.parametrize(
    "kw",
    [dict(levels=0), dict(iters_per_level=0), dict(eps_static=0.0), dict(eta=0.0), dict(eta=1.1), dict(init_step_flow=0.0),
     dict(mask_every=0), dict(warmup_fraction=1.5), dict(depth_inner_steps=0)],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SolverConfig(**kw)


def test_config_defaults():
    cfg = SolverConfig()
    assert (cfg.levels, cfg.iters_per_level, cfg.init_step_flow, cfg.step_halvings_max, cfg.eps_static, cfg.eta) == (5, 200, 0.5, 20, 0.5, 0.5)


def test_init_depth_single_pixel():
    depth = np.zeros((8, 10))
    depth[3, 7] = 10.0
    np.testing.assert_array_equal(init_depth(SparseRangeMap(depth)), np.full((8, 10, 1), 10.0))


def test_init_depth_of_a_full_constant_map():
    np.testing.assert_array_equal(init_depth(SparseRangeMap(np.full((6, 8), 4.5))), np.full((6, 8, 1), 4.5))


def test_init_depth_without_supervision_uses_the_prior():
    np.testing.assert_array_equal(init_depth(SparseRangeMap.empty(4, 4), 17.0), np.full((4, 4, 1), 17.0))


def test_nearest_fill_matches_brute_force():
    rng = np.random.default_rng(0)
    h, w = 20, 24
    depth = np.zeros((h, w))
    pts = [(3, 4, 10.0), (4, 5, 10.0), (15, 18, 30.0), (16, 19, 30.0), (2, 20, 20.0)]
    for r, c, d in pts:
        depth[r, c] = d + rng.uniform(0, 0.1)
    filled = nearest_fill(SparseRangeMap(depth))
    rows, cols = np.nonzero(depth)
    checked = 0
    for r, c in itertools.product(range(h), range(w)):
        d2 = (rows - r) ** 2 + (cols - c) ** 2
        best = np.flatnonzero(d2 == d2.min())
        if len(best) == 1:
            assert filled[r, c] == depth[rows[best[0]], cols[best[0]]]
            checked += 1
    assert checked > 0.8 * h * w


def test_init_depth_is_positive(scene):
    assert np.all(init_depth(rasterize_range_map(scene.clouds[0], scene.rig)) > 0)


def test_motion_segment_examples():
    assert np.all(motion_segment(np.zeros((4, 5, 2)), 0.5) == 1)
    flow = np.zeros((4, 5, 2))
    flow[..., 0] = 1.0
    assert not motion_segment(flow, 0.5).any()
    with pytest.raises(ConfigError):
        motion_segment(flow, 0.0)


def test_motion_segment_matches_scalar_oracle():
    flow = np.random.default_rng(1).normal(scale=0.6, size=(9, 7, 2))
    mask = motion_segment(flow, 0.5)
    for r, c in itertools.product(range(9), range(7)):
        assert mask[r, c, 0] == float(np.hypot(flow[r, c, 0], flow[r, c, 1]) < 0.5)


def test_consistency_projection_keeps_exact_inverses():
    O_f = np.zeros((8, 8, 2))
    O_f[..., 0], O_f[..., 1] = 1.0, -2.0
    f, b = consistency_projection(O_f, -O_f)
    np.testing.assert_array_equal(f, O_f)
    np.testing.assert_array_equal(b, -O_f)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 10, 2), elements=st.floats(-1, 1)))
def test_smoothed_gradient_is_a_descent_direction(g):
    assert np.sum(g * smoothed_gradient(g)) >= -1e-12


def test_trace_never_increases_within_a_block(estimate):
    trace = estimate.energy_trace
    assert len(trace) > 10
    for (_, _), entries in itertools.groupby(trace, key=lambda t: (t.level, t.block)):
        totals = [t.total for t in entries]
        assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_estimate_invariants(estimate, scene):
    assert estimate.O_f.shape == (48, 64, 2) and estimate.D_t.shape == (48, 64, 1)
    assert set(np.unique(estimate.mask)) <= {0.0, 1.0}
    assert np.all(estimate.D_t > 0) and np.all(estimate.D_t1 > 0)
    assert estimate.epochs == (0, 1)
    gt = scene.gt_flow[0]
    assert np.linalg.norm(estimate.O_f - gt, axis=2)[4:-4, 4:-4].mean() < 0.3


def test_solver_is_deterministic(scene, estimate):
    again = estimate_pair(scene.images[0], scene.images[1], scene.clouds[0], scene.clouds[1], scene.rig, FAST)
    for name in ("O_f", "O_b", "D_t", "D_t1", "mask"):
        assert np.array_equal(getattr(again, name), getattr(estimate, name))
    assert [t.total for t in again.energy_trace] == [t.total for t in estimate.energy_trace]


def test_swapping_inputs_swaps_outputs(scene, estimate):
    swapped = estimate_pair(scene.images[1], scene.images[0], scene.clouds[1], scene.clouds[0], scene.rig, FAST)
    assert np.array_equal(swapped.O_f, estimate.O_b) and np.array_equal(swapped.O_b, estimate.O_f)
    assert np.array_equal(swapped.D_t, estimate.D_t1) and np.array_equal(swapped.D_t1, estimate.D_t)
    assert swapped.report.total == estimate.report.total


def test_optimizer_reads_only_the_downsampled_cloud(scene, estimate, monkeypatch):
    seen = []
    real = solver.solve_pair

    def spy(I_t, I_t1, R_t, R_t1, cfg, epochs):
        seen.append((R_t, R_t1))
        return real(I_t, I_t1, R_t, R_t1, cfg, epochs)

    monkeypatch.setattr(solver, "solve_pair", spy)

    # move every held-out point; the optimiser must not notice
    tampered = []
    for cloud in scene.clouds[:2]:
        kept, held = holdout_split(cloud, FAST.eta, cloud_seed(FAST.seed, cloud.epoch))
        kept_rows = {tuple(p) for p in kept.points}
        pts = cloud.points.copy()
        is_kept = np.array([tuple(p) in kept_rows for p in pts])
        assert is_kept.sum() == len(kept) and len(held) > 0
        pts[~is_kept] *= 0.5
        tampered.append(PointCloud(pts, cloud.epoch))
    est = solver.estimate_pair(scene.images[0], scene.images[1], tampered[0], tampered[1], scene.rig, FAST)
    assert np.array_equal(est.O_f, estimate.O_f) and np.array_equal(est.D_t, estimate.D_t)

    R_t, _ = seen[0]
    expected = rasterize_range_map(downsample_cloud(scene.clouds[0], FAST.eta, cloud_seed(FAST.seed, 0)), scene.rig)
    assert np.array_equal(R_t.depth, expected.depth)
    assert np.array_equal(R_t.depth, input_range_map(scene.clouds[0], scene.rig, FAST).depth)
    assert R_t.valid.sum() < rasterize_range_map(scene.clouds[0], scene.rig).valid.sum()


def test_indivisible_images_rejected(scene):
    with pytest.raises(ShapeError):
        estimate_pair(scene.images[0][:46], scene.images[1][:46], scene.clouds[0], scene.clouds[1], scene.rig.cropped(0, 0, 64, 46), FAST)


def test_non_finite_input_raises(scene):
    bad = scene.images[0].copy()
    bad[10, 10] = np.nan
    R = rasterize_range_map(scene.clouds[0], scene.rig)
    with pytest.raises(NumericalError):
        solve_pair(bad, scene.images[1], R, R, dataclasses.replace(FAST, iters_per_level=2))


def test_identical_frames_stay_still(scene):
    cfg = dataclasses.replace(FAST, iters_per_level=20)
    est = estimate_pair(scene.images[0], scene.images[0], scene.clouds[0], scene.clouds[0], scene.rig, cfg)
    assert np.abs(est.O_f).max() < 1e-12 and est.mask.all()
