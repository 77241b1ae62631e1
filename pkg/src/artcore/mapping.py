"""Photometric optimisation of the Gaussian map: per-arrival schedules with replay sampling,
a visit-balanced global phase and optional joint pose refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .frontend import FrameClass
from .gaussians import SH_C0, GaussianMap, fade_slope, lod_select, write_map
from .geometry import (CameraIntrinsics, Sim3Transform, quat_mul, quat_normalize, quat_to_matrix,
                       sim3_exp, so3_exp_quat)
from .providers.base import Pointmap
from .splatting import splat, splat_backward

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5


class SupervisionError(RuntimeError):
    """A held-out frame was about to be used for supervision."""


# ---------------------------------------------------------------------------
# loss


def _ssim_terms(x, y):
    f = lambda a: ndimage.gaussian_filter(a, SSIM_SIGMA, mode="constant", truncate=3.5)  # noqa: E731
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    return f, mx, my, A1, A2, B1, B2


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    vals = []
    for c in range(x.shape[2]):
        _, _, _, A1, A2, B1, B2 = _ssim_terms(x[..., c], y[..., c])
        vals.append(A1 * A2 / (B1 * B2))
    return float(np.mean(vals))


def _ssim_grad(x, y):
    """d mean(SSIM map) / dx for one channel (zero-padded Gaussian window, self-adjoint)."""
    f, mx, my, A1, A2, B1, B2 = _ssim_terms(x, y)
    n = x.size
    s = A1 * A2 / (B1 * B2)
    d_mx = (2 * my * A2 / (B1 * B2) - s * 2 * mx / B1) / n
    d_sxy = (2 * A1 / (B1 * B2)) / n
    d_sxx = (-s / B2) / n
    # sxx = E[x^2] - mx^2, sxy = E[xy] - mx my
    g_mx = d_mx - 2 * mx * d_sxx - my * d_sxy
    return f(g_mx) + 2 * x * f(d_sxx) + y * f(d_sxy)


def photometric_loss(render: np.ndarray, target: np.ndarray, ssim_weight: float = 0.0
                     ) -> tuple[float, np.ndarray]:
    """Mean L1 (sign(0) taken as 0), optionally blended with D-SSIM = (1 - SSIM) / 2."""
    render = np.asarray(render, dtype=float)
    target = np.asarray(target, dtype=float)
    if render.shape != target.shape:
        raise ValueError("render and target differ in shape")
    d = render - target
    l1 = float(np.mean(np.abs(d)))
    g = np.sign(d) / d.size
    if ssim_weight <= 0:
        return l1, g
    C = render.shape[2]
    s = ssim(render, target)
    gs = np.stack([_ssim_grad(render[..., c], target[..., c]) for c in range(C)], axis=-1) / C
    loss = (1 - ssim_weight) * l1 + ssim_weight * 0.5 * (1 - s)
    return float(loss), (1 - ssim_weight) * g - 0.5 * ssim_weight * gs


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Moment-based first-order updates; state arrays grow with the parameter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = None

    def _fit(self, shape):
        if self.m is None:
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)
            self.t = np.zeros(shape[:1] if len(shape) else (), dtype=np.int64)
        elif self.m.shape != shape:
            n_old = self.m.shape[0]
            pad = [(0, shape[0] - n_old)] + [(0, 0)] * (len(shape) - 1)
            self.m = np.pad(self.m, pad)
            self.v = np.pad(self.v, pad)
            self.t = np.pad(self.t, pad[:1])

    def step(self, grad: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Return the update (to be added) for ``grad``; ``rows`` limits which rows advance."""
        grad = np.asarray(grad, dtype=float)
        self._fit(grad.shape)
        if rows is None:
            rows = slice(None) if grad.ndim else ()
        self.t[rows] += 1
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * grad[rows]
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * grad[rows] ** 2
        t = self.t[rows]
        t_b = t.reshape(t.shape + (1,) * (grad.ndim - 1)) if grad.ndim else t
        mh = self.m[rows] / (1 - self.b1 ** t_b)
        vh = self.v[rows] / (1 - self.b2 ** t_b)
        out = np.zeros_like(grad)
        out[rows] = -self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


@dataclass(frozen=True)
class OptimConfig:
    K: int = 30
    current_prob: float = 0.2
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_mu: float = 1.6e-4  # multiplied by the scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_pose: float = 1e-4
    lr_mlp: float = 1e-3
    lr_feature: float = 1e-3
    ssim_weight: float = 0.0
    global_budget: int = 500
    refine_poses: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    literal_fade: bool = False
    render_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not 0 <= self.current_prob <= 1:
            raise ValueError("current_prob must lie in [0, 1]")

    def iterations(self, frame_class: FrameClass) -> int:
        return self.K // 2 if FrameClass(frame_class) is FrameClass.COMMON else self.K


class FrameUpdateLedger:
    """Per-frame count of optimisation visits."""

    def __init__(self):
        self.visits: dict[int, int] = {}

    def register(self, frame_id: int) -> None:
        self.visits.setdefault(frame_id, 0)

    def record(self, frame_id: int) -> None:
        self.visits[frame_id] = self.visits.get(frame_id, 0) + 1

    def weights(self, frame_ids) -> np.ndarray:
        w = np.array([1.0 / (1.0 + self.visits.get(f, 0)) for f in frame_ids])
        return w / w.sum()


@dataclass
class TrainFrame:
    frame_id: int
    image: np.ndarray
    T_wc: Sim3Transform
    K: CameraIntrinsics


@dataclass
class StepReport:
    frame_id: int
    frame_class: FrameClass
    iterations: int
    inserted: int
    supervision: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


@dataclass
class ParamGradients:
    rows: np.ndarray  # primitives that took part in the render
    sh: np.ndarray
    logit: np.ndarray
    mu: np.ndarray
    log_sb: np.ndarray
    rot_res: np.ndarray  # left tangent
    f_l: np.ndarray
    f_r: np.ndarray
    scale_mlp: dict
    rot_mlp: dict
    pose: np.ndarray


def sample_supervision(rng: np.random.Generator, current: int, history: list[int],
                       current_prob: float = 0.2) -> int:
    """Current frame with probability ``current_prob``, otherwise a uniform past frame."""
    if not history:
        return current
    if rng.random() < current_prob:
        return current
    return history[int(rng.integers(len(history)))]


class MapOptimizer:
    def __init__(self, gmap: GaussianMap, cfg: OptimConfig | None = None):
        self.map = gmap
        self.cfg = cfg or OptimConfig()
        self.rng = np.random.default_rng([self.cfg.seed, 11])
        self.frames: dict[int, TrainFrame] = {}
        self.order: list[int] = []
        self.eval_frames: set[int] = set()
        self.ledger = FrameUpdateLedger()
        self.iteration = 0
        self.extent: float | None = None
        self.supervision_log: list[int] = []
        self.grad_norm_by_frame: dict[int, float] = {}
        self.loss_log: list[float] = []
        c = self.cfg
        self.opt = {
            "sh": Adam(c.lr_color), "logit": Adam(c.lr_opacity), "mu": Adam(c.lr_mu),
            "log_sb": Adam(c.lr_scale), "rot": Adam(c.lr_rotation), "f_l": Adam(c.lr_feature),
            "f_r": Adam(c.lr_feature),
        }
        self.mlp_opt = {(m, k): Adam(c.lr_mlp) for m in ("scale", "rotation")
                        for k in ("W1", "b1", "W2", "b2")}
        self.pose_opt: dict[int, Adam] = {}

    # ---- bookkeeping

    def mark_eval(self, frame_ids) -> None:
        self.eval_frames.update(int(f) for f in frame_ids)

    def add_frame(self, frame_id: int, image: np.ndarray, T_wc: Sim3Transform, K: CameraIntrinsics):
        if frame_id in self.eval_frames:
            raise SupervisionError(f"frame {frame_id} is held out for evaluation")
        if frame_id not in self.frames:
            self.order.append(frame_id)
        self.frames[frame_id] = TrainFrame(frame_id, image, T_wc, K)
        self.ledger.register(frame_id)

    def set_pose(self, frame_id: int, T_wc: Sim3Transform) -> None:
        f = self.frames[frame_id]
        self.frames[frame_id] = TrainFrame(frame_id, f.image, T_wc, f.K)

    def poses(self) -> dict[int, Sim3Transform]:
        return {k: f.T_wc for k, f in self.frames.items()}

    # ---- rendering

    def render(self, T_wc: Sim3Transform, K: CameraIntrinsics, return_cache: bool = False):
        g = self.map
        if len(g) == 0:
            e3 = np.zeros((0, 3))
            img = splat(e3, e3, np.zeros(0), e3, np.zeros((0, 4)), T_wc, K, background=self.cfg.background)
            return img, None
        S, q, aux = g.effective()
        idx, w = lod_select(g.d_max, g.mu, T_wc.t, self.cfg.literal_fade)
        res = splat(g.mu[idx], g.colors()[idx], g.alpha[idx] * w, S[idx], q[idx], T_wc, K,
                    background=self.cfg.background, workers=self.cfg.render_workers,
                    return_cache=return_cache)
        if not return_cache:
            return res, None
        img, cache = res
        return img, (cache, idx, w, aux)

    # ---- one optimisation iteration

    def _ensure_extent(self):
        if self.extent is None and len(self.map):
            c = self.map.mu.mean(axis=0)
            self.extent = max(float(np.percentile(np.linalg.norm(self.map.mu - c, axis=1), 90)), 1e-6)

    def loss_and_gradients(self, frame_id: int) -> tuple[float, "ParamGradients | None"]:
        """Photometric loss on one supervision frame and its gradient w.r.t. every trainable."""
        fr = self.frames[frame_id]
        g = self.map
        img, pack = self.render(fr.T_wc, fr.K, return_cache=True)
        loss, g_img = photometric_loss(img.color, fr.image, self.cfg.ssim_weight)
        if len(g) == 0:
            return loss, None
        cache, idx, w, (m, q_mlp, c_s, c_r) = pack
        gr = splat_backward(cache, g_img)
        n = len(g)
        g_sh = np.zeros((n, 3))
        g_sh[idx] = SH_C0 * gr.color
        # the splatter sees alpha * fade; opacity is optimised as a logit
        a = np.clip(g.alpha, 1e-6, 1 - 1e-6)
        g_logit = np.zeros(n)
        g_logit[idx] = gr.opacity * w * a[idx] * (1 - a[idx])
        g_mu = np.zeros((n, 3))
        g_mu[idx] = gr.mu
        # the fade weight depends on the distance from the camera centre to the mean
        off = g.mu[idx] - fr.T_wc.t
        d_r = np.linalg.norm(off, axis=1)
        g_d = gr.opacity * g.alpha[idx] * fade_slope(d_r, g.d_max[idx], self.cfg.literal_fade)
        g_off = (g_d / np.maximum(d_r, 1e-12))[:, None] * off
        g_mu[idx] += g_off
        # a left increment (v, w, sigma) moves the centre by v + w x t + sigma t
        t = fr.T_wc.t
        g_t = -g_off.sum(axis=0)
        g_pose = gr.pose + np.concatenate([g_t, np.cross(t, g_t), [g_t @ t]])
        # S = S_b * m(features)
        g_S = np.zeros((n, 3))
        g_S[idx] = gr.scales
        g_logsb = np.sum(g_S * m, axis=1) * g.S_b
        gp_s, gx_s = g.scale_mlp.backward(c_s, g_S * g.S_b[:, None])
        # R = R_mlp R_res, both with left tangent perturbations
        g_th = np.zeros((n, 3))
        g_th[idx] = gr.rotation
        g_res = np.einsum("nji,nj->ni", quat_to_matrix(q_mlp), g_th)
        gp_r, gx_r = g.rot_mlp.rotation_backward(c_r, g_th)
        gx = gx_s + gx_r
        F = g.cfg.feature_dim
        g_fr = np.zeros_like(g.grid.features)
        np.add.at(g_fr, g.vrow, gx[:, :F])
        return loss, ParamGradients(idx, g_sh, g_logit, g_mu, g_logsb, g_res, gx[:, F:], g_fr,
                                    gp_s, gp_r, g_pose)

    def train_step(self, frame_id: int, refine_pose: bool = False) -> float:
        if frame_id in self.eval_frames:
            raise SupervisionError(f"frame {frame_id} is held out for evaluation")
        self.supervision_log.append(frame_id)
        self.ledger.record(frame_id)
        self.iteration += 1
        loss, grads = self.loss_and_gradients(frame_id)
        self.loss_log.append(loss)
        if grads is None:
            return loss
        self.grad_norm_by_frame[frame_id] = (self.grad_norm_by_frame.get(frame_id, 0.0)
                                             + float(np.linalg.norm(grads.sh[grads.rows])))
        self._apply(grads)
        if refine_pose:
            opt = self.pose_opt.setdefault(frame_id, Adam(self.cfg.lr_pose))
            self.set_pose(frame_id, sim3_exp(opt.step(grads.pose)).compose(self.frames[frame_id].T_wc))
        return loss

    def _apply(self, gr: "ParamGradients"):
        g = self.map
        self._ensure_extent()
        rows = gr.rows
        g.sh = g.sh + self.opt["sh"].step(gr.sh, rows)
        a = np.clip(g.alpha, 1e-6, 1 - 1e-6)
        logit = np.log(a / (1 - a)) + self.opt["logit"].step(gr.logit, rows)
        alpha = g.alpha.copy()
        alpha[rows] = 1.0 / (1.0 + np.exp(-logit[rows]))
        g.alpha = alpha
        g.mu = g.mu + self.extent * self.opt["mu"].step(gr.mu, rows)
        g.S_b = g.S_b * np.exp(self.opt["log_sb"].step(gr.log_sb, rows))
        g.rot_res = quat_normalize(quat_mul(so3_exp_quat(self.opt["rot"].step(gr.rot_res, rows)),
                                            g.rot_res))
        g.f_l = g.f_l + self.opt["f_l"].step(gr.f_l, rows)
        g.grid.features = g.grid.features + self.opt["f_r"].step(gr.f_r)
        for name, mlp, gp in (("scale", g.scale_mlp, gr.scale_mlp), ("rotation", g.rot_mlp, gr.rot_mlp)):
            for k, v in gp.items():
                mlp.params[k] = mlp.params[k] + self.mlp_opt[(name, k)].step(v)

    # ---- schedules

    def streaming_step(self, frame_id: int, frame_class: FrameClass, image: np.ndarray,
                       T_wc: Sim3Transform, K: CameraIntrinsics, pointmap: Pointmap | None = None,
                       confidence: np.ndarray | None = None) -> StepReport:
        """Insert (mapper/keyframe only) and run K or K/2 iterations with replay sampling."""
        frame_class = FrameClass(frame_class)
        history = [f for f in self.order if f != frame_id]
        self.add_frame(frame_id, image, T_wc, K)
        inserted = 0
        if frame_class is not FrameClass.COMMON:
            if pointmap is None:
                raise ValueError("mapper frames and keyframes need a pointmap")
            rendered, _ = self.render(T_wc, K)
            inserted = self.map.insert_frame(frame_id, image, pointmap, rendered.color, confidence,
                                             T_wc, K.fx)
        rep = StepReport(frame_id, frame_class, self.cfg.iterations(frame_class), inserted)
        for _ in range(rep.iterations):
            fid = sample_supervision(self.rng, frame_id, history, self.cfg.current_prob)
            rep.supervision.append(fid)
            rep.losses.append(self.train_step(fid))
        return rep

    def global_phase(self, budget: int | None = None, refine_poses: bool | None = None) -> list[float]:
        """Visit-balanced optimisation over all supervision frames; no insertion."""
        budget = self.cfg.global_budget if budget is None else budget
        refine = self.cfg.refine_poses if refine_poses is None else refine_poses
        losses = []
        ids = list(self.order)
        if not ids:
            return losses
        for _ in range(budget):
            p = self.ledger.weights(ids)
            fid = ids[int(self.rng.choice(len(ids), p=p))]
            losses.append(self.train_step(fid, refine_pose=refine))
        return losses

    # ---- checkpoints

    def manifest(self) -> str:
        lines = [f"iteration = {self.iteration}", f"primitives = {len(self.map)}",
                 f"K = {self.cfg.K}", f"current_prob = {self.cfg.current_prob}",
                 f"extent = {self.extent!r}"]
        lines += [f"visits.{k} = {v}" for k, v in sorted(self.ledger.visits.items())]
        return "\n".join(lines) + "\n"

    def write_checkpoint(self, path) -> None:
        path = Path(path)
        write_map(path, self.map)
        path.with_name(path.name + ".manifest").write_text(self.manifest())
