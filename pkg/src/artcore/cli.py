"""Command line: ``artcore run | eval | render``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import ConfigError, load_config
from .geometry import CameraIntrinsics, Sim3Transform
from .pipeline import EXIT_CONFIG, EXIT_OK, EXIT_PROVIDER, run
from .providers.base import ProviderError
from .trajectory import TrajectoryError, read_tum, umeyama_align

log = logging.getLogger("artcore")


def _cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.deterministic:
        overrides["deterministic"] = "true"
    if args.no_loop_closure:
        overrides["loop_closure"] = "false"
    if args.provider:
        overrides["provider"] = args.provider
    if args.out:
        overrides["out"] = args.out
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects key=value, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        overrides[key.strip()] = value.strip()
    try:
        cfg = load_config(args.config, overrides=overrides)
        cfg.validate()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(cfg)
    except ProviderError as e:
        print(f"provider error: {e}", file=sys.stderr)
        return EXIT_PROVIDER
    m = report.metrics()
    print(json.dumps({"ate_rmse": m["ate_rmse"], "psnr_mean": m["psnr_mean"],
                      "keyframes": len(m["keyframes"]), "loops": len(m["loops"]),
                      "complete": m["complete"], "out": cfg.out}, sort_keys=True))
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    for err in report.artifact_errors:
        print(f"artifact error: {err}", file=sys.stderr)
    return report.exit_code


def _cmd_eval(args) -> int:
    try:
        est, gt = read_tum(args.traj_est), read_tum(args.traj_gt)
        res = umeyama_align(est, gt, with_scale=not args.no_scale)
    except (OSError, TrajectoryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    S = res.alignment
    print(json.dumps({"ate_rmse": res.ate_rmse, "pairs": res.n_pairs,
                      "scale": S.s, "rotation_wxyz": [float(v) for v in S.q],
                      "translation": [float(v) for v in S.t]}, sort_keys=True))
    return EXIT_OK


def _parse_pose(text: str) -> Sim3Transform:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) not in (7, 8):
        raise ValueError("--pose expects 'tx ty tz qx qy qz qw [s]'")
    q = np.array([vals[6], vals[3], vals[4], vals[5]])
    n = np.linalg.norm(q)
    if not n > 0:
        raise ValueError("zero quaternion")
    return Sim3Transform(vals[7] if len(vals) == 8 else 1.0, q / n, np.array(vals[:3]))


def _cmd_render(args) -> int:
    from .gaussians import read_map
    from .splatting import render_snapshot, save_png

    try:
        T = _parse_pose(args.pose)
        snap = read_map(args.map)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    W, H = args.width, args.height
    cx = (W - 1) / 2.0 if args.cx is None else args.cx
    cy = (H - 1) / 2.0 if args.cy is None else args.cy
    K = CameraIntrinsics(args.fx, args.fy or args.fx, cx, cy, W, H)
    img = render_snapshot(snap, T, K, background=tuple(args.background))
    try:
        save_png(args.out, img.color)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artcore", description="Streaming Sim(3) tracking and "
                                "level-of-detail Gaussian mapping on CPU.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline and write artifacts")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--seed", type=int)
    r.add_argument("--deterministic", action="store_true", help="single thread, zeroed timings")
    r.add_argument("--no-loop-closure", action="store_true")
    r.add_argument("--provider", choices=["synthetic", "files"])
    r.add_argument("--out", help="output directory")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="extra config override, e.g. --set optim.K=10 (repeatable)")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="ATE RMSE of a TUM trajectory against ground truth")
    e.add_argument("--traj-est", required=True)
    e.add_argument("--traj-gt", required=True)
    e.add_argument("--no-scale", action="store_true", help="SE(3) instead of Sim(3) alignment")
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("render", help="render an exported map from one pose")
    d.add_argument("--map", required=True, help="map.adgs file")
    d.add_argument("--pose", required=True, help="'tx ty tz qx qy qz qw [s]', camera to world")
    d.add_argument("--out", required=True, help="output PNG")
    d.add_argument("--width", type=int, default=64)
    d.add_argument("--height", type=int, default=48)
    d.add_argument("--fx", type=float, default=50.0)
    d.add_argument("--fy", type=float)
    d.add_argument("--cx", type=float)
    d.add_argument("--cy", type=float)
    d.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    d.set_defaults(func=_cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
