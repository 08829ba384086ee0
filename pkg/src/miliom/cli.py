"""Command line: run, simulate, eval and export-map.

Exit codes: 0 success, 1 data error, 2 estimation divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, DataError
from .estimator import EstimationDivergence
from .evaluation import EvaluationError, evaluate_ate
from .imu import ImuDataError
from .io import (
    load_keyframes,
    load_scans,
    read_imu,
    read_manifest,
    read_trajectory,
    save_keyframes,
    write_dataset,
    write_map,
    write_trajectory,
)
from .keyframes import export_global_map
from .pipeline import RunResult, run_pipeline
from .plotting import plot_axis_errors, plot_timing, plot_trajectories
from .sim import SCENARIOS

log = logging.getLogger("miliom")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_DIVERGED = 2


def write_timing(out: Path, result: RunResult):
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "extraction_ms", "frontend_ms", "backend_ms", "loop_ms", "features", "factors"])
        for r in result.timings:
            w.writerow([f"{r.t:.6f}", f"{r.extraction * 1e3:.3f}", f"{r.frontend * 1e3:.3f}", f"{r.backend * 1e3:.3f}",
                        f"{r.loop * 1e3:.3f}", r.features, r.factors])
    if result.timings:
        arr = np.array([[r.t, r.extraction, r.frontend, r.backend, r.loop] for r in result.timings])
        plot_timing(out / "timing.png", *arr.T)


def write_ate_report(out: Path, ate, stem: str = "ate"):
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ex", "ey", "ez", "rot_deg"])
        rot = ate.rotation_errors if len(ate.rotation_errors) == ate.pairs else np.full(ate.pairs, np.nan)
        for t, e, r in zip(ate.t, ate.errors, np.rad2deg(rot)):
            w.writerow([f"{t:.6f}", f"{e[0]:.9f}", f"{e[1]:.9f}", f"{e[2]:.9f}", f"{r:.6f}"])
    plot_axis_errors(out / f"{stem}.png", ate.t, ate.errors, ate.rmse)


def cmd_run(args) -> int:
    manifest = read_manifest(args.manifest)
    cfg_path = args.config or manifest.config
    cfg = Config.from_file(cfg_path) if cfg_path else Config()
    if args.threads is not None:
        cfg = cfg.updated(threads=args.threads)
    cfg = cfg.updated(primary_lidar=manifest.primary)
    scans = load_scans(manifest)
    imu = read_imu(manifest.imu)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = run_pipeline(scans, imu, cfg)
    (out / "config.txt").write_text(cfg.to_text())
    write_trajectory(out / "trajectory.txt", result.t, result.p, result.q)
    write_trajectory(out / "optimized.txt", result.frame_t, result.frame_p, result.frame_q)
    write_timing(out, result)
    save_keyframes(out / "keyframes.npz", result.store)
    write_map(out / "map.txt", *export_global_map(result.store, cfg.map_leaf or None))
    for t, why in result.skipped:
        log.warning("skipped frame at %.6f: %s", t, why)

    loops = np.array([r.loop for r in result.timings])
    loops = loops[np.isfinite(loops)]
    print(f"frames {len(result.frame_t)}  skipped {len(result.skipped)}  keyframes {len(result.store)}")
    if len(loops):
        print(f"mean loop {np.mean(loops) * 1e3:.1f} ms")
    if manifest.ground_truth is not None:
        gt = read_trajectory(manifest.ground_truth)
        ate = evaluate_ate(result.t, result.p, result.q, gt.t, gt.p, gt.q, cfg.association_window)
        write_ate_report(out, ate)
        plot_trajectories(out / "trajectory.png", result.p, gt.p)
        print(f"ATE RMSE {ate.rmse:.6f} m  max rotation {np.rad2deg(ate.max_rotation):.4f} deg")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.scenario not in SCENARIOS:
        raise DataError(f"<args>:0: unknown scenario {args.scenario!r}; choose from {sorted(SCENARIOS)}")
    kwargs = {"seed": args.seed, "noiseless": args.noiseless}
    if args.duration is not None:
        kwargs["duration"] = args.duration
    sc = SCENARIOS[args.scenario](**kwargs)
    rng = np.random.default_rng(args.seed)
    scans = [s for lidar in sc.lidars for s in sc.scans(lidar, rng)]
    imu = sc.imu(rng)
    manifest = write_dataset(args.out, scans, imu, sc.ground_truth(), primary=sc.lidars[0].lidar_id,
                             config_text=Config().to_text(), binary=args.binary)
    print(f"wrote {len(scans)} scans and {len(imu)} IMU samples; manifest {manifest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    ate = evaluate_ate(est.t, est.p, est.q, gt.t, gt.p, gt.q, args.max_gap, align=not args.no_align)
    out = Path(args.out) if args.out else Path(args.est).parent
    out.mkdir(parents=True, exist_ok=True)
    write_ate_report(out, ate)
    print(f"pairs {ate.pairs}  ATE RMSE {ate.rmse:.6f} m  max rotation {np.rad2deg(ate.max_rotation):.4f} deg")
    return EXIT_OK


def cmd_export_map(args) -> int:
    run = Path(args.run_dir)
    store = load_keyframes(run / "keyframes.npz")
    xyz, kind = export_global_map(store, args.leaf or None)
    target = Path(args.out) if args.out else run / "map.txt"
    write_map(target, xyz, kind)
    print(f"{len(xyz)} map points from {len(store)} keyframes -> {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="miliom", description="Multi-lidar inertial odometry and mapping")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the estimator on a dataset manifest")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", default="miliom_run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("scenario", help=", ".join(sorted(SCENARIOS)))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="miliom_sim")
    p.add_argument("--duration", type=float)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--binary", action="store_true", help="binary scan files")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="absolute trajectory error of an estimate")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--out")
    p.add_argument("--max-gap", type=float, default=0.01)
    p.add_argument("--no-align", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-map", help="rebuild the global map from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--leaf", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_map)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ImuDataError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
