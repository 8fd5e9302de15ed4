"""Command-line entry point: simulate, track, eval, overlay.

Exit codes: 0 success, 2 tracking divergence, 1 usage or I/O errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import dataio, evaluation, pipeline
from .config import (
    build_refiner_config,
    build_scene,
    build_tracker_config,
    parse_config,
    scene_key_values,
    with_defaults,
    RUN_KEYS,
)
from .errors import EvtrackError
from .simulator import generate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2


def cmd_simulate(args) -> int:
    values = parse_config(args.config)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    run = with_defaults(values, RUN_KEYS, "run")
    scene = build_scene(values, base_dir=os.path.dirname(os.path.abspath(args.config)))
    events, frames, gt = generate(scene, seed=int(run["seed"]))
    # keep tracker/refiner/run settings alongside the scene so that a plain
    # `track <dataset>` reproduces the configured run without --config
    extra = {k: v for k, v in values.items() if k not in scene_key_values(values)}
    dataio.write_dataset(args.out, {**scene_key_values(values), **extra}, events, frames, gt)
    print(f"wrote {len(events)} events, {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    events, frames, gt, K, values = dataio.read_dataset(args.dataset)
    if args.config:
        values.update(parse_config(args.config))
    run = with_defaults(values, RUN_KEYS, "run")
    mode = args.mode or run["mode"]
    scene = build_scene(values, base_dir=args.dataset)
    tracker_cfg = build_tracker_config(values)
    refiner_cfg = build_refiner_config(values)

    result = pipeline.run_tracking(
        events, frames, gt, scene.shape, K, scene.contrast,
        tracker_cfg, refiner_cfg, mode=mode,
        zeta=float(run["zeta"]), samples=int(run["silhouette_samples"]),
        parallel=args.parallel,
    )

    os.makedirs(args.out, exist_ok=True)
    n_ev = n_kf = 0
    if result.event_trajectory is not None:
        dataio.write_tum(os.path.join(args.out, "trajectory_events.txt"), result.event_trajectory)
        n_ev = len(result.event_trajectory)
    if result.keyframe_trajectory is not None:
        dataio.write_tum(
            os.path.join(args.out, "trajectory_keyframes.txt"), result.keyframe_trajectory
        )
        n_kf = len(result.keyframe_trajectory)
    pipeline.write_log(os.path.join(args.out, "log.jsonl"), result.log)

    print(f"mode={mode} spline_poses={n_ev} keyframes={n_kf}")
    if result.diverged:
        print(f"tracking diverged: {result.reason}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    est = dataio.read_tum(args.est)
    gt = dataio.read_tum(args.gt)
    lines = []
    ate = evaluation.ate_rmse(est, gt)
    lines.append(f"ATE_RMSE_m {ate:.6f}")
    try:
        transl, rot, per_fraction = evaluation.rpe(est, gt)
        for f, te, re in per_fraction:
            lines.append(f"RPE_{int(f * 100)}pct_m {te:.6f} deg {re:.6f}")
        lines.append(f"RPE_mean_m {transl:.6f} deg {rot:.6f}")
    except EvtrackError as exc:
        lines.append(f"RPE_unavailable {exc}")
    report = "\n".join(lines)
    print(report)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(report + "\n")
    return EXIT_OK


def cmd_overlay(args) -> int:
    _, frames, _, K, values = dataio.read_dataset(args.dataset)
    traj = dataio.read_tum(args.trajectory)
    scene = build_scene(values, base_dir=args.dataset)
    path = evaluation.render_overlay(frames, traj, scene.shape, K, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evtrack",
        description="Event-plus-frame 6-DoF object tracking toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="render a synthetic dataset")
    p_sim.add_argument("--config", required=True, help="scene config file")
    p_sim.add_argument("--out", required=True, help="output dataset directory")
    p_sim.add_argument("--seed", type=int, default=None, help="rng seed override")
    p_sim.set_defaults(func=cmd_simulate)

    p_trk = sub.add_parser("track", help="run the tracker on a dataset")
    p_trk.add_argument("dataset", help="dataset directory")
    p_trk.add_argument("--config", default=None, help="config overriding dataset values")
    p_trk.add_argument("--out", required=True, help="output directory")
    p_trk.add_argument(
        "--mode", choices=("combined", "event_only", "frame_only"), default=None
    )
    p_trk.add_argument("--parallel", action="store_true", help="run the layers concurrently")
    p_trk.set_defaults(func=cmd_track)

    p_ev = sub.add_parser("eval", help="trajectory accuracy metrics")
    p_ev.add_argument("est", help="estimated trajectory file")
    p_ev.add_argument("gt", help="ground-truth trajectory file")
    p_ev.add_argument("--out", default=None, help="also write the report here")
    p_ev.set_defaults(func=cmd_eval)

    p_ov = sub.add_parser("overlay", help="silhouette contour overlay image")
    p_ov.add_argument("dataset", help="dataset directory")
    p_ov.add_argument("--trajectory", required=True, help="trajectory file to draw")
    p_ov.add_argument("--out", required=True, help="output directory")
    p_ov.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EvtrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
