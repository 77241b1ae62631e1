"""Streaming orchestration: frontend -> backend -> mapper stages, held-out evaluation,
trajectory metrics and artifact emission."""

from __future__ import annotations

import dataclasses
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import emit_artifacts
from .backend import Backend
from .config import PipelineConfig
from .frontend import FrameClass, FrameEstimate, Tracker
from .gaussians import GaussianMap
from .geometry import CameraIntrinsics, Sim3Transform
from .mapping import MapOptimizer
from .providers.base import Frame, Pointmap, PointmapProvider, ProviderError
from .providers.files import FilesProvider
from .providers.synthetic import SyntheticProvider
from .splatting import psnr
from .trajectory import Trajectory, TrajectoryError, umeyama_align

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_INCOMPLETE = 4

_STOP = object()


class StageError(RuntimeError):
    def __init__(self, stage: str, frame_id: int | None, cause: BaseException):
        where = f" at frame {frame_id}" if frame_id is not None else ""
        super().__init__(f"{stage} stage failed{where}: {cause}")
        self.stage = stage
        self.frame_id = frame_id
        self.cause = cause


# ---------------------------------------------------------------------------
# messages between stages (immutable)


@dataclass(frozen=True)
class TrackedFrame:
    frame: Frame
    estimate: FrameEstimate
    K: CameraIntrinsics
    held_out: bool


@dataclass(frozen=True)
class MapperInput:
    frame: Frame
    frame_class: FrameClass
    T_wc: Sim3Transform
    K: CameraIntrinsics
    pointmap: Pointmap | None
    confidence: np.ndarray | None


@dataclass
class RunReport:
    ate_rmse: float | None
    psnr_per_frame: dict[int, float]
    n_gaussians_per_level: list[int]
    timing_ms: dict[str, float]
    frame_classes: dict[int, FrameClass]
    eval_frames: list[int]
    keyframes: list[int]
    loops: list[tuple[int, int]]
    complete: bool = True
    error: str | None = None
    exit_code: int = EXIT_OK
    trajectory: Trajectory | None = None
    ground_truth: Trajectory | None = None
    supervised_frames: set[int] = field(default_factory=set)
    artifact_errors: list[str] = field(default_factory=list)

    @property
    def psnr_mean(self) -> float | None:
        return float(np.mean(list(self.psnr_per_frame.values()))) if self.psnr_per_frame else None

    def metrics(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "psnr_mean": self.psnr_mean,
            "psnr_per_frame": [{"frame_id": int(k), "psnr": float(v)}
                               for k, v in sorted(self.psnr_per_frame.items())],
            "n_gaussians_per_level": [int(n) for n in self.n_gaussians_per_level],
            "timing": {k: float(self.timing_ms.get(k, 0.0))
                       for k in ("frontend_ms", "backend_ms", "mapper_ms")},
            "frame_classes": [{"frame_id": int(k), "class": FrameClass(v).value}
                              for k, v in sorted(self.frame_classes.items())],
            "complete": self.complete,
            "error": self.error,
            "eval_frames": [int(i) for i in self.eval_frames],
            "keyframes": [int(i) for i in self.keyframes],
            "loops": [[int(i), int(j)] for i, j in self.loops],
        }


def make_provider(cfg: PipelineConfig) -> PointmapProvider:
    if cfg.provider == "files":
        return FilesProvider(cfg.data)
    syn = dataclasses.replace(cfg.synthetic, seed=cfg.seed)
    return SyntheticProvider(syn)


# ---------------------------------------------------------------------------
# the pipeline


class Pipeline:
    """Holds the three stage states; ``run`` drives them threaded or on one thread."""

    def __init__(self, cfg: PipelineConfig, provider: PointmapProvider | None = None):
        self.cfg = cfg
        self.provider = provider if provider is not None else make_provider(cfg)
        backend_cfg = dataclasses.replace(cfg.backend, loop_closure=cfg.loop_closure)
        self.tracker = Tracker(self.provider, cfg.frontend)
        self.backend = Backend(self.provider, backend_cfg)
        workers = 1 if cfg.deterministic else cfg.render_workers
        self.map = GaussianMap(dataclasses.replace(cfg.map, seed=cfg.seed))
        self.optimizer = MapOptimizer(self.map, dataclasses.replace(cfg.optim, seed=cfg.seed,
                                                                    render_workers=workers))
        self.frame_ids: list[int] = []
        self.timestamps: dict[int, float] = {}
        self.classes: dict[int, FrameClass] = {}
        self.reference: dict[int, tuple[int, Sim3Transform]] = {}  # frame -> (keyframe, T_kc)
        self.eval_frames: list[int] = []
        self.intrinsics: dict[int, CameraIntrinsics] = {}
        self.timing = {"frontend_ms": 0.0, "backend_ms": 0.0, "mapper_ms": 0.0}
        self._timing_lock = threading.Lock()

    # ---- stage steps

    def _clock(self, key: str, t0: float) -> None:
        with self._timing_lock:
            self.timing[key] += 1e3 * (time.perf_counter() - t0)

    def frontend_step(self, index: int, frame: Frame) -> TrackedFrame:
        t0 = time.perf_counter()
        try:
            est = self.tracker.track(frame)
        except ProviderError as e:
            raise ProviderError(f"frame {frame.id}: {e}") from e
        held_out = self.cfg.is_eval(index)
        self._clock("frontend_ms", t0)
        return TrackedFrame(frame, est, self.tracker.K, held_out)

    def backend_step(self, msg: TrackedFrame) -> MapperInput | None:
        t0 = time.perf_counter()
        est, frame = msg.estimate, msg.frame
        fid = frame.id
        self.frame_ids.append(fid)
        self.timestamps[fid] = frame.timestamp
        self.classes[fid] = est.frame_class
        self.intrinsics[fid] = msg.K
        if msg.held_out:
            self.eval_frames.append(fid)
        if est.promoted is not None:
            self._add_keyframe(est.promoted, msg.K)
        if est.frame_class is FrameClass.KEYFRAME:
            self._add_keyframe(est, msg.K)
        else:
            self.reference[fid] = (est.keyframe_id, est.T_kc)
        out = None
        if not msg.held_out and self.cfg.mapping:
            T_wc = self.world_pose(fid)
            pm = conf = None
            if est.frame_class is not FrameClass.COMMON:
                pm = self.provider.pointmap(fid)
                conf = self.backend.confidence(fid, T_wc, msg.K, pm)
            out = MapperInput(frame, est.frame_class, T_wc, msg.K, pm, conf)
        self._clock("backend_ms", t0)
        return out

    def _add_keyframe(self, est: FrameEstimate, K: CameraIntrinsics) -> None:
        graph = self.backend.graph
        fid = est.frame_id
        if len(graph) == 0:
            T_wk = Sim3Transform.identity()
        else:
            T_wk = graph.nodes[est.keyframe_id].compose(est.T_kc)
        seq = est.corrs if len(graph) and len(est.corrs) else None
        upd = self.backend.add_keyframe(fid, T_wk, K, seq)
        if upd.decision.detected:
            self.tracker.freeze_focal()
        self.classes[fid] = FrameClass.KEYFRAME
        self.reference[fid] = (fid, Sim3Transform.identity())

    def mapper_step(self, msg: MapperInput) -> None:
        t0 = time.perf_counter()
        self.optimizer.streaming_step(msg.frame.id, msg.frame_class, msg.frame.image, msg.T_wc, msg.K,
                                      msg.pointmap, msg.confidence)
        self._clock("mapper_ms", t0)

    def world_pose(self, fid: int) -> Sim3Transform:
        kf, T_kc = self.reference[fid]
        return self.backend.graph.nodes[kf].compose(T_kc)

    # ---- drivers

    def _run_deterministic(self, errors: list):
        stage = "frontend"
        fid = None
        try:
            for index, fid in enumerate(self.provider.frame_ids()):
                stage = "frontend"
                frame = self.provider.frame(fid)
                msg = self.frontend_step(index, frame)
                stage = "backend"
                out = self.backend_step(msg)
                if out is not None:
                    stage = "mapper"
                    self.mapper_step(out)
        except Exception as e:  # noqa: BLE001 - any stage failure yields a partial report
            errors.append(StageError(stage, fid, e))

    def _run_threaded(self, errors: list):
        cap = self.cfg.queue_capacity
        q_fb: queue.Queue = queue.Queue(maxsize=cap)
        q_bm: queue.Queue = queue.Queue(maxsize=cap)
        abort = threading.Event()

        def put(q, item) -> bool:
            while not abort.is_set():
                try:
                    q.put(item, timeout=0.05)
                    return True
                except queue.Full:
                    continue
            return False

        def get(q):
            while not abort.is_set():
                try:
                    return q.get(timeout=0.05)
                except queue.Empty:
                    continue
            return _STOP

        def fail(stage, fid, e):
            errors.append(StageError(stage, fid, e))
            abort.set()

        def frontend():
            fid = None
            try:
                for index, fid in enumerate(self.provider.frame_ids()):
                    if not put(q_fb, self.frontend_step(index, self.provider.frame(fid))):
                        return
            except Exception as e:  # noqa: BLE001
                fail("frontend", fid, e)
            put(q_fb, _STOP)

        def backend():
            fid = None
            try:
                while (msg := get(q_fb)) is not _STOP:
                    fid = msg.frame.id
                    out = self.backend_step(msg)
                    if out is not None and not put(q_bm, out):
                        return
            except Exception as e:  # noqa: BLE001
                fail("backend", fid, e)
            put(q_bm, _STOP)

        def mapper():
            fid = None
            try:
                while (msg := get(q_bm)) is not _STOP:
                    fid = msg.frame.id
                    self.mapper_step(msg)
            except Exception as e:  # noqa: BLE001
                fail("mapper", fid, e)

        threads = [threading.Thread(target=f, name=f"artcore-{f.__name__}", daemon=True)
                   for f in (frontend, backend, mapper)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def run(self, emit: bool = True) -> RunReport:
        errors: list[StageError] = []
        if self.cfg.deterministic:
            self._run_deterministic(errors)
        else:
            self._run_threaded(errors)
        complete = not errors
        error = str(errors[0]) if errors else None
        if errors:
            log.error("%s", error)

        optimizer = self.optimizer if self.cfg.mapping else None
        poses = {fid: self.world_pose(fid) for fid in self.frame_ids if fid in self.reference
                 and self.reference[fid][0] in self.backend.graph.nodes}
        if complete and optimizer is not None and optimizer.frames:
            t0 = time.perf_counter()
            for fid in optimizer.order:
                if fid in poses:
                    optimizer.set_pose(fid, poses[fid])
            optimizer.global_phase()
            self._clock("mapper_ms", t0)

        psnrs, images = {}, {}
        if optimizer is not None and len(self.map):
            for fid in self.eval_frames:
                if fid not in poses:
                    continue
                target = self.provider.frame(fid).image
                render, _ = optimizer.render(poses[fid], self.intrinsics[fid])
                psnrs[fid] = psnr(render.color, target)
                images[fid] = (render.color, target)

        ids = [f for f in self.frame_ids if f in poses]
        est = Trajectory(np.array([self.timestamps[f] for f in ids]), [poses[f] for f in ids])
        gt_traj, ate = None, None
        gt = self.provider.ground_truth()
        if gt:
            gids = [f for f in self.frame_ids if f in gt]
            gt_traj = Trajectory(np.array([self.timestamps[f] for f in gids]), [gt[f] for f in gids])
            try:
                ate = umeyama_align(est, gt_traj).ate_rmse
            except TrajectoryError as e:
                log.warning("ATE not computed: %s", e)

        timing = dict(self.timing)
        if self.cfg.deterministic:
            timing = {k: 0.0 for k in timing}
        exit_code = EXIT_OK
        if errors:
            exit_code = EXIT_PROVIDER if isinstance(errors[0].cause, ProviderError) else EXIT_INCOMPLETE
        report = RunReport(
            ate_rmse=ate, psnr_per_frame=psnrs,
            n_gaussians_per_level=self.map.counts_per_level(), timing_ms=timing,
            frame_classes=dict(self.classes), eval_frames=list(self.eval_frames),
            keyframes=list(self.backend.graph.nodes), loops=list(self.backend.loops),
            complete=complete, error=error, exit_code=exit_code, trajectory=est,
            ground_truth=gt_traj, supervised_frames=set(self.optimizer.supervision_log),
        )
        if emit:
            out = Path(self.cfg.out)
            report.artifact_errors = emit_artifacts(
                out, report.metrics(), est, gt_traj, images if self.cfg.write_images else {},
                self.map if optimizer is not None else None, report.loops,
                self.backend.graph.dump(), {f: p.t for f, p in poses.items()}, optimizer)
        return report


def run(cfg: PipelineConfig, provider: PointmapProvider | None = None, emit: bool = True) -> RunReport:
    cfg.validate()
    return Pipeline(cfg, provider).run(emit=emit)
