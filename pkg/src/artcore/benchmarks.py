"""Reproducible synthetic benchmarks: the drift-injected loop ablation and the
64x64 photometric-progress scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import Backend, BackendConfig
from .frontend import FrameClass, estimate_relative_pose
from .gaussians import GaussianMap, MapConfig
from .geometry import Sim3Transform
from .mapping import MapOptimizer, OptimConfig
from .providers.synthetic import SyntheticProvider, SyntheticSceneConfig
from .splatting import psnr
from .trajectory import Trajectory, ate_rmse

LOOP_FRAMES = 30


def drift_bias(seed: int) -> np.ndarray:
    """Per-seed bias on sequential relative poses: small rotation plus a log-scale offset."""
    rng = np.random.default_rng([seed, 99])
    sigma = rng.choice([-1.0, 1.0]) * rng.uniform(0.006, 0.012)
    return np.concatenate([np.zeros(3), rng.normal(0.0, 0.004, 3), [sigma]])


@dataclass
class LoopRun:
    ate: float
    loops: list[tuple[int, int]]


def loop_benchmark_run(seed: int, closure: bool, n_frames: int = LOOP_FRAMES,
                       bias: np.ndarray | None = None) -> LoopRun:
    """Every frame is a keyframe; sequential edges come from biased correspondences,
    loop edges from the clean provider."""
    bias = drift_bias(seed) if bias is None else bias
    base = dict(n_frames=n_frames, seed=seed, trajectory="circle")
    clean = SyntheticProvider(SyntheticSceneConfig(**base))
    biased = SyntheticProvider(SyntheticSceneConfig(**base, match_bias=tuple(bias)))
    backend = Backend(clean, BackendConfig(loop_closure=closure))
    gt = clean.ground_truth()
    backend.add_keyframe(0, gt[0], clean.K)
    loops = []
    for i in range(1, n_frames):
        _, _, corrs = biased.match(biased.frame(i), biased.frame(i - 1))
        rel = estimate_relative_pose(corrs, None, clean.K, Sim3Transform.identity())
        T = backend.graph.nodes[i - 1] @ rel.T_kc
        upd = backend.add_keyframe(i, T, clean.K, corrs)
        if upd.decision.detected:
            loops.append((i, upd.decision.selected))
    ids = list(range(n_frames))
    stamps = np.array(ids, dtype=float)
    est = Trajectory(stamps, [backend.graph.nodes[i] for i in ids])
    ref = Trajectory(stamps, [gt[i] for i in ids])
    return LoopRun(ate_rmse(est, ref), loops)


def loop_ablation(seeds=range(10)) -> list[tuple[float, float]]:
    """(closure-off ATE, closure-on ATE) per seed."""
    return [(loop_benchmark_run(s, False).ate, loop_benchmark_run(s, True).ate) for s in seeds]


# ---------------------------------------------------------------------------
# photometric progress


TOY_SCENE = SyntheticSceneConfig(width=64, height=64, n_frames=24, seed=0, n_landmarks=60,
                                 trajectory="line-with-return", radius=1.0)
TOY_MAPPER_STRIDE = 4


@dataclass
class ProgressResult:
    init_psnr: float
    streaming_psnr: float
    global_psnr: float
    eval_frames: list[int]
    supervised: set[int]


def _toy_class(i: int) -> FrameClass:
    if i == 0:
        return FrameClass.KEYFRAME
    return FrameClass.MAPPER if i % TOY_MAPPER_STRIDE == 0 else FrameClass.COMMON


def photometric_progress(scene: SyntheticSceneConfig = TOY_SCENE,
                         optim: OptimConfig | None = None, eval_stride: int = 8) -> ProgressResult:
    """Held-out PSNR of (a) the insertion-only map, (b) after streaming, (c) after the
    global phase. Ground-truth poses isolate the mapper from tracking."""
    prov = SyntheticProvider(scene)
    gt, K = prov.ground_truth(), prov.K
    n = scene.n_frames
    held = [i for i in range(n) if i % eval_stride == eval_stride - 1]
    train = [i for i in range(n) if i not in held]

    def held_psnr(opt):
        return float(np.mean([psnr(opt.render(gt[i], K)[0].color, prov.frame(i).image)
                              for i in held]))

    base = MapOptimizer(GaussianMap(MapConfig()), OptimConfig())
    for i in train:
        if _toy_class(i) is not FrameClass.COMMON:
            rendered, _ = base.render(gt[i], K)
            base.map.insert_frame(i, prov.frame(i).image, prov.pointmap(i), rendered.color,
                                  None, gt[i], K.fx)
    init = held_psnr(base)

    opt = MapOptimizer(GaussianMap(MapConfig()), optim or OptimConfig(global_budget=500))
    opt.mark_eval(held)
    for i in train:
        opt.streaming_step(i, _toy_class(i), prov.frame(i).image, gt[i], K, prov.pointmap(i), None)
    stream = held_psnr(opt)
    opt.global_phase()
    return ProgressResult(init, stream, held_psnr(opt), held, set(opt.supervision_log))
