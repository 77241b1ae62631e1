"""Deterministic synthetic scene: a textured box room seen from a moving camera.

The room walls carry soft colored discs (landmark impostors). Every frame is
ray-cast exactly against the convex room, so pointmaps, correspondences and
co-visibility are known in closed form. Nothing inside the room occludes
anything else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import (CameraIntrinsics, Sim3Transform, matrix_to_quat, project_points,
                        sim3_exp)
from .base import CorrespondenceSet, Frame, GaugePointmap, Pointmap, PointmapProvider, ProviderError

TRAJECTORIES = ("circle", "lissajous", "line-with-return")

_TAG_POINT_NOISE = 1
_TAG_MATCH = 2
_TAG_MULTI = 3
_TAG_FOCAL = 4


@dataclass(frozen=True)
class SyntheticSceneConfig:
    n_landmarks: int = 600
    trajectory: str = "circle"
    n_frames: int = 60
    sigma_point: float = 0.0
    outlier_fraction: float = 0.0
    scale_drift: float = 1.0
    seed: int = 0
    width: int = 64
    height: int = 48
    focal: float = 50.0
    focal_noise: float = 0.0
    known_intrinsics: bool = True
    match_stride: int = 4
    # systematic error applied to every two-view match (Sim(3) tangent), used to inject odometry drift
    match_bias: tuple = (0.0,) * 7
    room: tuple = (5.0, 2.5, 5.0)
    radius: float = 1.5
    supersample: int = 2
    fps: float = 30.0
    # frames per traversal of the trajectory; None: the whole sequence is one traversal
    period: int | None = None

    def __post_init__(self):
        if self.sigma_point < 0:
            raise ValueError("sigma_point must be non-negative")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.n_landmarks < 0 or self.n_frames < 1 or self.scale_drift <= 0:
            raise ValueError("invalid frame count or scale drift")
        if self.period is not None and self.period < 1:
            raise ValueError("period must be at least 1")
        if len(self.match_bias) != 7:
            raise ValueError("match_bias must be a 7-vector")


def _look_rotation(direction: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation for a camera looking along ``direction`` with world +y as down."""
    z = direction / np.linalg.norm(direction)
    y = np.array([0.0, 1.0, 0.0])
    y = y - z * (y @ z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1)


def trajectory_poses(cfg: SyntheticSceneConfig) -> list[Sim3Transform]:
    """Camera-to-world poses; the scale component carries the configured drift."""
    n = cfg.n_frames
    period = cfg.period or n
    poses = []
    for i in range(n):
        tau = (i % period) / period
        if cfg.trajectory == "circle":
            phi = 2 * np.pi * tau
            pos = np.array([cfg.radius * np.cos(phi), 0.1 * np.sin(3 * phi), cfg.radius * np.sin(phi)])
            yaw = phi + np.deg2rad(30.0)
            pitch = 0.05 * np.sin(2 * phi)
        elif cfg.trajectory == "lissajous":
            phi = 2 * np.pi * tau
            pos = np.array([cfg.radius * np.sin(phi), 0.15 * np.sin(3 * phi), 0.6 * cfg.radius * np.sin(2 * phi)])
            yaw = np.pi / 2 + 0.5 * np.sin(phi)
            pitch = 0.05 * np.cos(phi)
        else:
            # out along x and back, revisiting the start
            a = 2 * tau if tau <= 0.5 else 2 * (1 - tau)
            pos = np.array([-cfg.radius + 2 * cfg.radius * a, 0.05 * np.sin(4 * np.pi * tau), 0.0])
            yaw = np.pi / 2 + 0.25 * np.sin(2 * np.pi * tau)
            pitch = 0.0
        d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(pitch), np.sin(yaw) * np.cos(pitch)])
        R = _look_rotation(d)
        poses.append(Sim3Transform(cfg.scale_drift**i, matrix_to_quat(R), pos))
    return poses


class SyntheticScene:
    """Room geometry, landmark texture and per-frame exact geometry for one config."""

    def __init__(self, cfg: SyntheticSceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        self.half = np.asarray(cfg.room, dtype=float)
        self.landmarks, self.normals = self._sample_walls(rng, cfg.n_landmarks)
        hue = rng.uniform(0, 1, cfg.n_landmarks)
        self.colors = self._hue_to_rgb(hue) * rng.uniform(0.6, 1.0, (cfg.n_landmarks, 1))
        self.radii = rng.uniform(0.15, 0.4, cfg.n_landmarks)
        self.wall_tint = rng.uniform(0.25, 0.45, (6, 3))
        self._tree = cKDTree(self.landmarks)
        self.K = CameraIntrinsics(cfg.focal, cfg.focal, (cfg.width - 1) / 2.0,
                                  (cfg.height - 1) / 2.0, cfg.width, cfg.height)
        self.poses = trajectory_poses(cfg)

    def _sample_walls(self, rng, n):
        hx, hy, hz = self.half
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        wall = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, (n, 3)) * self.half
        normals = np.zeros((n, 3))
        for w in range(6):
            axis, sign = divmod(w, 2)
            m = wall == w
            u[m, axis] = self.half[axis] * (1 if sign == 0 else -1)
            normals[m, axis] = -1.0 if sign == 0 else 1.0
        return u, normals

    @staticmethod
    def _hue_to_rgb(h):
        k = (np.array([5.0, 3.0, 1.0])[None, :] + 6 * h[:, None]) % 6
        return 1 - np.clip(np.minimum(k, 4 - k), 0, 1)

    # ---------------------------------------------------------------- geometry

    def ray_hits(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exit distance along each world ray and the wall index that is hit."""
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(dirs > 0, self.half, -self.half)
            t = (bound - origin) / dirs
        t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
        axis = np.argmin(t, axis=-1)
        tmin = np.take_along_axis(t, axis[..., None], -1)[..., 0]
        sign = np.take_along_axis(dirs, axis[..., None], -1)[..., 0] < 0
        return tmin, 2 * axis + sign

    def texture(self, X: np.ndarray, wall: np.ndarray) -> np.ndarray:
        """Wall color at world points ``X`` (N, 3)."""
        base = self.wall_tint[wall] * (0.85 + 0.15 * np.sin(0.9 * X[:, [0]] + 0.7 * X[:, [2]])
                                       * np.cos(1.3 * X[:, [1]]))
        if len(self.landmarks) == 0:
            return base
        # sparse (point, landmark) overlaps, composited in landmark index order
        hits = self._tree.query_ball_point(X, r=self.radii.max() + 0.03)
        counts = np.fromiter((len(h) for h in hits), dtype=int, count=len(hits))
        if counts.sum() == 0:
            return base
        pt = np.repeat(np.arange(len(X)), counts)
        lm = np.concatenate([np.sort(h) for h in hits if h]).astype(int)
        d = np.linalg.norm(X[pt] - self.landmarks[lm], axis=1)
        w = np.clip((self.radii[lm] - d) / 0.06 + 0.5, 0.0, 1.0)
        rank = np.arange(len(pt)) - np.repeat(np.cumsum(counts) - counts, counts)
        color = base.copy()
        for r in range(counts.max()):
            m = rank == r
            p, wj = pt[m], w[m][:, None]
            color[p] = (1 - wj) * color[p] + wj * self.colors[lm[m]]
        return color

    def camera_rays(self, pose: Sim3Transform, sub: int = 1):
        K, H, W = self.K, self.cfg.height, self.cfg.width
        offs = (np.arange(sub) + 0.5) / sub - 0.5
        u = (np.arange(W)[None, :, None, None] + offs[None, None, None, :])
        v = (np.arange(H)[:, None, None, None] + offs[None, None, :, None])
        u, v = np.broadcast_arrays(u, v)
        d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
        return d_cam @ pose.R.T  # unnormalized world directions with unit camera z

    def render_frame(self, i: int) -> tuple[np.ndarray, Pointmap]:
        pose = self.poses[i]
        sub = self.cfg.supersample
        H, W = self.cfg.height, self.cfg.width
        dirs = self.camera_rays(pose, sub)
        t, wall = self.ray_hits(pose.t, dirs)
        X = pose.t + t[..., None] * dirs
        col = self.texture(X.reshape(-1, 3), wall.reshape(-1)).reshape(H, W, sub, sub, 3)
        image = np.clip(col.mean(axis=(2, 3)), 0.0, 1.0)
        dirs0 = self.camera_rays(pose, 1)[:, :, 0, 0]
        t0, _ = self.ray_hits(pose.t, dirs0)
        Xw = pose.t + t0[..., None] * dirs0
        P = pose.inverse().apply(Xw.reshape(-1, 3)).reshape(H, W, 3)
        valid = np.ones((H, W), dtype=bool)
        return image, Pointmap(P, valid, np.ones((H, W)))

    def visible_landmarks(self, pose: Sim3Transform, margin: float = 0.0) -> np.ndarray:
        P = pose.inverse().apply(self.landmarks)
        front = P[:, 2] > 1e-6
        out = np.zeros(len(P), dtype=bool)
        uv = project_points(P[front], self.K)[:, :2]
        ok = ((uv[:, 0] >= -margin) & (uv[:, 0] <= self.cfg.width - 1 + margin)
              & (uv[:, 1] >= -margin) & (uv[:, 1] <= self.cfg.height - 1 + margin))
        out[np.flatnonzero(front)[ok]] = True
        # landmarks facing away from the camera are on the far side of their wall
        facing = np.einsum("ij,ij->i", self.normals, pose.t - self.landmarks) > 0
        return out & facing


class SyntheticProvider(PointmapProvider):
    """Ground-truth pointmap provider over a :class:`SyntheticScene`.

    The full sequence (images, exact pointmaps, visibility) is precomputed at
    construction; afterwards the provider is read-only.
    """

    def __init__(self, cfg: SyntheticSceneConfig):
        self.cfg = cfg
        self.scene = SyntheticScene(cfg)
        self.K = self.scene.K
        self._frames: list[Frame] = []
        self._exact: list[Pointmap] = []
        self._noisy: list[Pointmap] = []
        self._vis = []
        for i in range(cfg.n_frames):
            img, pm = self.scene.render_frame(i)
            self._exact.append(pm)
            self._noisy.append(self._add_noise(pm, [cfg.seed, _TAG_POINT_NOISE, i]))
            img.setflags(write=False)
            self._frames.append(Frame(i, i / cfg.fps, img, self.K if cfg.known_intrinsics else None))
            self._vis.append(self.scene.visible_landmarks(self.scene.poses[i]))

    def _add_noise(self, pm: Pointmap, key) -> Pointmap:
        if self.cfg.sigma_point == 0:
            return pm
        rng = np.random.default_rng(key)
        pts = pm.points + rng.normal(0.0, self.cfg.sigma_point, pm.points.shape)
        valid = pm.valid & (pts[..., 2] > 0)
        return Pointmap(np.where(valid[..., None], pts, pm.points), valid, pm.raw_conf)

    # ---------------------------------------------------------------- access

    def frame_ids(self) -> list[int]:
        return list(range(self.cfg.n_frames))

    def _check(self, i: int) -> int:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < self.cfg.n_frames:
            raise KeyError(f"unknown frame id {i}")
        return int(i)

    def frame(self, frame_id: int) -> Frame:
        return self._frames[self._check(frame_id)]

    def pointmap(self, frame_id: int) -> Pointmap:
        return self._noisy[self._check(frame_id)]

    def exact_pointmap(self, frame_id: int) -> Pointmap:
        return self._exact[self._check(frame_id)]

    def ground_truth(self) -> dict[int, Sim3Transform]:
        return {i: p for i, p in enumerate(self.scene.poses)}

    def relative_pose(self, k: int, c: int) -> Sim3Transform:
        """Ground-truth T_kc mapping frame-c camera points into frame k."""
        P = self.scene.poses
        return P[self._check(k)].inverse().compose(P[self._check(c)])

    # ---------------------------------------------------------------- matching

    def match(self, frame_a: Frame, frame_b: Frame):
        a, b = self._check(frame_a.id), self._check(frame_b.id)
        pm_a, pm_b = self._noisy[a], self._noisy[b]
        s = self.cfg.match_stride
        H, W = self.cfg.height, self.cfg.width
        vv, uu = np.meshgrid(np.arange(s // 2, H, s), np.arange(s // 2, W, s), indexing="ij")
        vv, uu = vv.ravel(), uu.ravel()
        keep = pm_a.valid[vv, uu]
        vv, uu = vv[keep], uu[keep]
        pix_c = np.stack([uu, vv], axis=1).astype(float)
        P_c = pm_a.points[vv, uu]
        if a == b:
            return pm_a, pm_b, CorrespondenceSet(a, b, pix_c, pix_c.copy(), P_c, P_c.copy())

        T_ba = self.relative_pose(b, a)
        if any(self.cfg.match_bias):
            T_ba = sim3_exp(np.asarray(self.cfg.match_bias, dtype=float)).compose(T_ba)
        P_true = self._exact[a].points[vv, uu]
        P_b = T_ba.apply(P_true)
        inb = P_b[:, 2] > 1e-6
        uvz = np.full((len(P_b), 3), -1.0)
        uvz[inb] = project_points(P_b[inb], self.K)
        inb &= (uvz[:, 0] >= 0) & (uvz[:, 0] <= W - 1) & (uvz[:, 1] >= 0) & (uvz[:, 1] <= H - 1)
        pix_c, P_c, P_b, uvz = pix_c[inb], P_c[inb], P_b[inb], uvz[inb]
        pix_k = uvz[:, :2].copy()

        rng = np.random.default_rng([self.cfg.seed, _TAG_MATCH, a, b])
        P_k = P_b + (rng.normal(0.0, self.cfg.sigma_point, P_b.shape) if self.cfg.sigma_point > 0 else 0.0)
        P_k[:, 2] = np.maximum(P_k[:, 2], 1e-6)
        n_out = int(round(self.cfg.outlier_fraction * len(P_k)))
        if n_out > 0:
            idx = rng.permutation(len(P_k))[:n_out]
            lo, hi = P_b.min(axis=0), P_b.max(axis=0)
            for m in idx:
                for _ in range(1000):
                    cand = rng.uniform(lo, hi)
                    if cand[2] <= 1e-6:
                        continue
                    uv = project_points(cand, self.K)[:2]
                    if (0 <= uv[0] <= W - 1 and 0 <= uv[1] <= H - 1
                            and np.linalg.norm(uv - pix_k[m]) > 3.0):
                        P_k[m], pix_k[m] = cand, uv
                        break
        return pm_a, pm_b, CorrespondenceSet(a, b, pix_c, pix_k, P_c, P_k)

    # ---------------------------------------------------------------- retrieval, loops, focal

    def covisibility(self, a: int, b: int) -> float:
        va, vb = self._vis[self._check(a)], self._vis[self._check(b)]
        union = np.count_nonzero(va | vb)
        return 0.0 if union == 0 else np.count_nonzero(va & vb) / union

    def retrieval_score(self, query: int, candidate: int) -> float:
        return 0.05 * self.covisibility(query, candidate)

    def multi_frame_pointmaps(self, frame_ids: Sequence[int]) -> list[Pointmap]:
        ids = [self._check(i) for i in frame_ids]
        if len(ids) < 2:
            raise ValueError("multi-frame inference needs at least two frames")
        rng = np.random.default_rng([self.cfg.seed, _TAG_MULTI, *ids])
        xi = np.concatenate([rng.normal(0, 2.0, 3), rng.normal(0, 1.0, 3), [rng.uniform(-1, 1)]])
        gauge = sim3_exp(xi)
        out = []
        for i in ids:
            pm = self._exact[i]
            Xw = self.scene.poses[i].apply(pm.points.reshape(-1, 3))
            pts = gauge.apply(Xw).reshape(pm.points.shape)
            if self.cfg.sigma_point > 0:
                pts = pts + rng.normal(0.0, self.cfg.sigma_point, pts.shape)
            # the gauge may put points behind the original camera; validity only tracks finiteness
            out.append(GaugePointmap(pts, pm.valid.copy(), pm.raw_conf.copy()))
        return out

    def focal_estimate(self, frame: Frame) -> float:
        i = self._check(frame.id)
        if self.cfg.focal_noise == 0:
            return float(self.cfg.focal)
        rng = np.random.default_rng([self.cfg.seed, _TAG_FOCAL, i])
        return float(self.cfg.focal * (1.0 + self.cfg.focal_noise * rng.normal()))


def generate_sequence(cfg: SyntheticSceneConfig):
    """Frames, ground-truth camera-to-world poses and intrinsics for ``cfg``."""
    prov = SyntheticProvider(cfg)
    return [prov.frame(i) for i in prov.frame_ids()], list(prov.scene.poses), prov.K
