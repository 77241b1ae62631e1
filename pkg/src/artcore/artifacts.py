"""Run outputs: metrics JSON, trajectories, evaluation image pairs and a trajectory overlay SVG."""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import jsonschema
import numpy as np

from .splatting import save_png
from .trajectory import Trajectory, write_tum

log = logging.getLogger(__name__)

METRICS_SCHEMA = {
    "type": "object",
    "required": ["ate_rmse", "psnr_mean", "psnr_per_frame", "n_gaussians_per_level", "timing",
                 "frame_classes"],
    "properties": {
        "ate_rmse": {"type": ["number", "null"], "minimum": 0},
        "psnr_mean": {"type": ["number", "null"]},
        "psnr_per_frame": {
            "type": "array",
            "items": {"type": "object", "required": ["frame_id", "psnr"],
                      "properties": {"frame_id": {"type": "integer"}, "psnr": {"type": "number"}}},
        },
        "n_gaussians_per_level": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "timing": {
            "type": "object",
            "required": ["frontend_ms", "backend_ms", "mapper_ms"],
            "properties": {k: {"type": "number", "minimum": 0}
                           for k in ("frontend_ms", "backend_ms", "mapper_ms")},
        },
        "frame_classes": {
            "type": "array",
            "items": {"type": "object", "required": ["frame_id", "class"],
                      "properties": {"frame_id": {"type": "integer"},
                                     "class": {"enum": ["common", "mapper", "keyframe"]}}},
        },
        "complete": {"type": "boolean"},
        "error": {"type": ["string", "null"]},
        "eval_frames": {"type": "array", "items": {"type": "integer"}},
        "keyframes": {"type": "array", "items": {"type": "integer"}},
        "loops": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                             "minItems": 2, "maxItems": 2}},
    },
}


def validate_metrics(metrics: dict) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``metrics`` follows :data:`METRICS_SCHEMA`
    and every number is finite."""
    jsonschema.validate(metrics, METRICS_SCHEMA)

    def walk(x):
        if isinstance(x, float) and not math.isfinite(x):
            raise jsonschema.ValidationError("non-finite number in metrics")
        if isinstance(x, dict):
            for v in x.values():
                walk(v)
        elif isinstance(x, list):
            for v in x:
                walk(v)

    walk(metrics)


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def write_metrics(path, metrics: dict) -> None:
    validate_metrics(metrics)
    Path(path).write_text(metrics_json(metrics))


def trajectory_svg(estimated: np.ndarray, ground_truth: np.ndarray | None = None,
                   loops: list[tuple[np.ndarray, np.ndarray]] = (), size: int = 480,
                   margin: int = 20) -> str:
    """Top-down (x, z) overlay; one polyline per trajectory and one marker line per loop edge."""
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    gt = None if ground_truth is None else np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    pts = [est[:, [0, 2]]] + ([gt[:, [0, 2]]] if gt is not None else [])
    allp = np.vstack(pts) if any(len(p) for p in pts) else np.zeros((1, 2))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    scale = (size - 2 * margin) / span

    def xy(p):
        q = (np.asarray(p)[..., [0, 2]] - lo) * scale + margin
        return q[..., 0], size - q[..., 1]

    def poly(P):
        x, y = xy(P)
        return " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(x, y))

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(size), height=str(size),
                     viewBox=f"0 0 {size} {size}")
    ET.SubElement(svg, "rect", width="100%", height="100%", fill="white")
    if gt is not None:
        ET.SubElement(svg, "polyline", points=poly(gt), fill="none", stroke="#2a9d3a",
                      attrib={"stroke-width": "2", "class": "ground-truth"})
    ET.SubElement(svg, "polyline", points=poly(est), fill="none", stroke="#c0392b",
                  attrib={"stroke-width": "1.5", "class": "estimated"})
    for a, b in loops:
        (x1, y1), (x2, y2) = [xy(np.asarray(p)[None]) for p in (a, b)]
        ET.SubElement(svg, "line", x1=f"{x1[0]:.3f}", y1=f"{y1[0]:.3f}", x2=f"{x2[0]:.3f}",
                      y2=f"{y2[0]:.3f}", stroke="#1f5fbf",
                      attrib={"stroke-dasharray": "4 2", "class": "loop-edge"})
    return ET.tostring(svg, encoding="unicode") + "\n"


def emit_artifacts(out_dir, metrics: dict, estimated: Trajectory, ground_truth: Trajectory | None,
                   eval_images: dict[int, tuple[np.ndarray, np.ndarray]], gmap=None,
                   loops: list[tuple[int, int]] = (), graph_dump: str | None = None,
                   positions_by_frame: dict[int, np.ndarray] | None = None,
                   optimizer=None) -> list[str]:
    """Write every artifact; returns a list of per-file error messages (empty on success)."""
    out = Path(out_dir)
    errors: list[str] = []

    def attempt(name, fn):
        try:
            fn()
        except (OSError, ValueError, jsonschema.ValidationError) as e:
            log.error("failed to write %s: %s", name, e)
            errors.append(f"{name}: {e}")

    out.mkdir(parents=True, exist_ok=True)
    # plain 8-column TUM unless a pose carries a scale, which then goes in a 9th column
    scaled = lambda tr: any(T.s != 1.0 for T in tr.poses)  # noqa: E731
    attempt("trajectory.txt", lambda: write_tum(out / "trajectory.txt", estimated, scaled(estimated)))
    if ground_truth is not None:
        attempt("groundtruth.txt", lambda: write_tum(out / "groundtruth.txt", ground_truth,
                                                     scaled(ground_truth)))
    attempt("metrics.json", lambda: write_metrics(out / "metrics.json", metrics))
    if eval_images:
        (out / "eval").mkdir(exist_ok=True)
        for fid, (render, target) in sorted(eval_images.items()):
            attempt(f"eval/{fid:06}", lambda r=render, t=target, f=fid: (
                save_png(out / "eval" / f"frame_{f:06}_render.png", r),
                save_png(out / "eval" / f"frame_{f:06}_target.png", t)))
    if gmap is not None:
        if optimizer is not None:
            attempt("map.adgs", lambda: optimizer.write_checkpoint(out / "map.adgs"))
        else:
            from .gaussians import write_map
            attempt("map.adgs", lambda: write_map(out / "map.adgs", gmap))
    if graph_dump is not None:
        attempt("graph.txt", lambda: (out / "graph.txt").write_text(graph_dump))
    pos = positions_by_frame or {}
    loop_pts = [(pos[i], pos[j]) for i, j in loops if i in pos and j in pos]
    gt_pos = None
    est_pos = estimated.positions()
    if ground_truth is not None and len(ground_truth) >= 3 and len(estimated) >= 3:
        from .trajectory import umeyama_align
        try:
            al = umeyama_align(estimated, ground_truth).alignment
            est_pos = al.apply(est_pos)
            loop_pts = [(al.apply(a), al.apply(b)) for a, b in loop_pts]
        except ValueError as e:
            log.warning("overlay alignment skipped: %s", e)
        gt_pos = ground_truth.positions()
    attempt("trajectory.svg", lambda: (out / "trajectory.svg").write_text(
        trajectory_svg(est_pos, gt_pos, loop_pts)))
    return errors
