"""Command-line entry point: ``surfflow {synth,estimate,eval,profile,lift}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, SurfFlowError
from .geom import save_calibration, write_cloud
from .kinematics import (
    DEFAULT_LAMBDAS,
    DEFAULT_REGION,
    channel_cross_section,
    lift_to_scene_flow,
    smooth_flow,
    speed_profile,
    write_cross_section,
)
from .metrics import census_loss, depth_eval, endpoint_error, rmsd
from .raster import backward_warp, write_field
from .solver import SolverConfig, estimate_pair
from .synth import SceneSpec, generate

log = logging.getLogger("surfflow")

DEFAULT_METRICS = ("rmsd", "census", "mae10", "mae30", "mae50", "abs_rel")


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _region(text):
    return _floats(text, 4)


def _pair(text):
    return tuple(int(v) for v in _floats(text, 2))


def _triple(text):
    return _floats(text, 3)


# ---------------------------------------------------------------------------
# estimate


def solver_config(args) -> SolverConfig:
    cfg = io.solver_config_from_dict(io.load_toml(args.config)) if args.config else SolverConfig()
    weights = cfg.weights
    w = {}
    if args.lambda_flow is not None:
        w["lambda_flow"] = args.lambda_flow
    if args.lambda_depth is not None:
        w["lambda_depth"] = args.lambda_depth
    if args.no_static:
        w["enable_static"] = False
    if args.no_cycle:
        w["enable_cycle"] = False
    top = {"weights": dataclasses.replace(weights, **w)}
    if args.eta is not None:
        top["eta"] = args.eta
    if args.seed is not None:
        top["seed"] = args.seed
    return dataclasses.replace(cfg, **top)


def _load_frame(manifest: io.DatasetManifest, epoch: int):
    try:
        return manifest.image(epoch), manifest.cloud(epoch)
    except (OSError, ValueError) as exc:
        raise SurfFlowError(f"epoch {epoch}: {exc}") from exc


def _estimate_one(manifest: io.DatasetManifest, epoch: int, cfg: SolverConfig, out: str) -> tuple[int, str | None]:
    """Solve pair ``(epoch, epoch + 1)``; returns an error message instead of raising."""
    target = io.pair_dir(out, epoch)
    if io.is_complete(target):
        return epoch, None
    try:
        rig = manifest.rig()
        I_t, X_t = _load_frame(manifest, epoch)
        I_t1, X_t1 = _load_frame(manifest, epoch + 1)
        step = 2 ** (cfg.levels - 1)
        if I_t.shape[:2] != rig.shape:
            raise SurfFlowError(f"epoch {epoch}: image {I_t.shape[1]}x{I_t.shape[0]} does not match the calibration")
        if rig.height % step or rig.width % step:
            raise SurfFlowError(
                f"epoch {epoch}: {rig.width}x{rig.height} is not divisible by {step}; set a crop in the manifest"
            )
        est = estimate_pair(I_t, I_t1, X_t, X_t1, rig, cfg)
        io.save_estimate(est, target, cfg)
        return epoch, None
    except Exception as exc:  # reported per pair so the other pairs still run
        msg = str(exc)
        if not msg.startswith("epoch "):
            msg = f"pair at epoch {epoch}: {type(exc).__name__}: {msg}"
        return epoch, msg


def cmd_estimate(args) -> int:
    manifest = io.DatasetManifest.load(args.manifest)
    cfg = solver_config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    epochs = manifest.epochs[:-1]
    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [_estimate_one(manifest, e, cfg, args.out) for e in epochs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_estimate_one, [manifest] * len(epochs), epochs, [cfg] * len(epochs), [args.out] * len(epochs)))
    failed = [msg for _, msg in results if msg]
    for epoch, msg in results:
        if msg:
            log.error(msg)
        else:
            log.info("pair %d done", epoch)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# eval


def evaluate_pair(manifest: io.DatasetManifest, est: io.StoredEstimate, rig) -> dict:
    t, _ = est.epochs
    I_t, X_t = _load_frame(manifest, t)
    I_t1, _ = _load_frame(manifest, t + 1)
    recon = backward_warp(I_t1, est.O_f)
    out = {"epoch": t, "rmsd": rmsd(255.0 * I_t, 255.0 * recon), "census": census_loss(I_t, recon)}
    out.update({k: v for k, v in depth_eval(est.D_t, X_t, rig).to_dict().items()})
    gt = manifest.flow_truth(t)
    if gt is not None:
        out["epe"], out["epe_below_1px"] = endpoint_error(est.O_f, gt, 1.0)
    return out


def cmd_eval(args) -> int:
    manifest = io.DatasetManifest.load(args.manifest)
    rig = manifest.rig()
    ests = io.load_estimates(args.estimates)
    if args.frames:
        a, b = args.frames
        ests = [e for e in ests if a <= e.epochs[0] and e.epochs[1] <= b]
    if not ests:
        raise SurfFlowError(f"no complete estimates under {args.estimates}")
    pairs = [evaluate_pair(manifest, e, rig) for e in ests]
    keys = [k for k in pairs[0] if k != "epoch" and not k.startswith("n")]
    keys += [k for k in ("epe", "epe_below_1px") if k not in keys and any(k in p for p in pairs)]
    summary = {}
    for k in keys:
        vals = [p[k] for p in pairs if p.get(k) is not None]
        summary[k] = float(np.mean(vals)) if vals else None
    report = {"summary": summary, "pairs": pairs}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    requested = args.metrics.split(",") if args.metrics else list(DEFAULT_METRICS)
    missing = [m for m in requested if summary.get(m) is None]
    if missing:
        log.error("metrics unavailable: %s", ", ".join(missing))
        return 1
    return 0


# ---------------------------------------------------------------------------
# lift / profile


def _smoothed_flows(ests: list[io.StoredEstimate], lambdas) -> list[np.ndarray]:
    """Temporally smoothed forward flow per pair; edges keep their own flow."""
    out = []
    for i, e in enumerate(ests):
        interior = 0 < i < len(ests) - 1
        if interior:
            prev, nxt = ests[i - 1], ests[i + 1]
            interior = prev.epochs[1] == e.epochs[0] and nxt.epochs[0] == e.epochs[1]
        if interior:
            out.append(smooth_flow(prev.O_f, prev.O_b, e.O_f, nxt.O_f, lambdas))
        else:
            out.append(e.O_f)
    return out


def _lifted(args):
    manifest = io.DatasetManifest.load(args.manifest)
    rig = manifest.rig()
    ests = io.load_estimates(args.estimates)
    if len(ests) < 2:
        raise SurfFlowError("need at least two pair estimates")
    flows = _smoothed_flows(ests, args.lambdas)
    frames = [lift_to_scene_flow(f, e.D_t, e.D_t1, rig, static=e.mask) for f, e in zip(flows, ests)]
    return manifest, ests, frames


def cmd_profile(args) -> int:
    manifest, ests, frames = _lifted(args)
    prof = speed_profile(
        frames,
        args.region,
        manifest.frame_interval,
        epochs=[e.epochs[0] for e in ests],
        moving_only=args.moving_only,
    )
    prof.write_csv(args.out)
    missing = int(np.isnan(prof.speeds).sum())
    if missing:
        log.warning("%d epochs have no valid pixels in the region", missing)
    return 0


def cmd_lift(args) -> int:
    manifest, ests, frames = _lifted(args)
    out = Path(args.out)
    for e, f in zip(ests, frames):
        d = out / f"scene_{e.epochs[0]:06d}"
        d.mkdir(parents=True, exist_ok=True)
        write_field(f.points_t, d / "points.dflo")
        write_field(f.velocity, d / "velocity.dflo")
        write_field(f.valid.astype(np.float64), d / "valid.dflo")
        if args.band:
            rows = channel_cross_section(f, f.speed(manifest.frame_interval), args.band, args.bin_width)
            write_cross_section(rows, d / "cross_section.csv")
    return 0


# ---------------------------------------------------------------------------
# synth


def write_dataset(scene, out) -> io.DatasetManifest:
    out = Path(out)
    for sub in ("images", "clouds", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_calibration(scene.rig, out / "calib.json")
    for k, image in enumerate(scene.images):
        io.write_image(image, out / "images" / f"{k:06d}.png")
        write_cloud(scene.clouds[k], out / "clouds" / f"{k:06d}.dpc")
        write_field(scene.gt_depth[k], out / "gt" / f"depth_{k:06d}.dflo")
    for k, flow in enumerate(scene.gt_flow):
        write_field(flow, out / "gt" / f"flow_{k:06d}.dflo")
    manifest = io.DatasetManifest(
        root=out,
        images="images/{epoch:06d}.png",
        clouds="clouds/{epoch:06d}.dpc",
        calibration="calib.json",
        first=0,
        last=len(scene.images) - 1,
        frame_interval=scene.spec.frame_interval,
        gt_flow="gt/flow_{epoch:06d}.dflo",
        gt_depth="gt/depth_{epoch:06d}.dflo",
    )
    manifest.save(out / "manifest.json")
    (out / "gt" / "speeds.json").write_text(json.dumps({"speeds_mps": scene.gt_speed_schedule.tolist()}) + "\n")
    return manifest


def cmd_synth(args) -> int:
    table = io.load_toml(args.config) if args.config else {}
    if args.seed is not None:
        table["seed"] = args.seed
    spec = io.build_dataclass(SceneSpec, table, "scene spec")
    write_dataset(generate(spec), args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surfflow", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", help="TOML file with SceneSpec keys")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="solve every consecutive pair")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TOML file with SolverConfig keys and a [weights] table")
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda-flow", type=float)
    p.add_argument("--lambda-depth", type=float)
    p.add_argument("--no-static", action="store_true")
    p.add_argument("--no-cycle", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="score estimates against the images and clouds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimates", required=True)
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.add_argument("--frames", type=_pair, help="first,last epoch to include")
    p.add_argument("--metrics", help="comma-separated metrics that must be available")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("profile", cmd_profile, "flow-speed profile CSV over a LiDAR-frame box"),
        ("lift", cmd_lift, "3D points and velocities per pair, optional cross-section"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--estimates", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--lambdas", type=_triple, default=DEFAULT_LAMBDAS)
        if name == "profile":
            p.add_argument("--region", type=_region, default=DEFAULT_REGION, help="x0,x1,y0,y1 in metres")
            p.add_argument("--moving-only", action="store_true")
        else:
            p.add_argument("--band", type=_pair, help="v0,v1 pixel rows for the cross-section")
            p.add_argument("--bin-width", type=float, default=0.5)
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SurfFlowError, ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
