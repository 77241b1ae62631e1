"""Per-frame tracking against the latest keyframe and frame classification."""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass

import numpy as np

from .geometry import (BehindCameraError, CameraIntrinsics, Sim3Transform, backproject,
                       estimate_local_covariances, focal_jacobian, point_tangent_jacobian,
                       projection_jacobian, propagate_covariance, sim3_exp)
from .providers.base import CorrespondenceSet

log = logging.getLogger(__name__)


class InsufficientCorrespondencesError(ValueError):
    pass


class ClassificationError(ValueError):
    pass


class FrameClass(str, enum.Enum):
    COMMON = "common"
    MAPPER = "mapper"
    KEYFRAME = "keyframe"


@dataclass(frozen=True)
class FrontendConfig:
    tau_k_ratio: float = 0.333
    tau_k_floor: float = 30.0
    tau_m_at_512: float = 24.0
    tau_det: float = 1e-2
    huber_delta: float = 1.345
    huber_eps: float = 1e-9
    w_logz: float = 4.0
    max_iters: int = 50
    eps: float = 1e-10
    k_f: int = 5
    min_corrs: int = 12
    inlier_threshold: float = 3.0
    # neighbourhood radius for local covariances, in pixels of footprint at the median depth
    cov_radius_px: float = 3.0
    freeze_focal_after_loop: bool = True
    max_gating_rounds: int = 5

    def __post_init__(self):
        for name in ("tau_k_ratio", "tau_k_floor", "tau_m_at_512", "tau_det", "huber_delta",
                     "huber_eps", "w_logz", "eps", "inlier_threshold", "cov_radius_px"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1 or self.k_f < 1 or self.min_corrs < 1:
            raise ValueError("iteration and count settings must be positive")

    def tau_k(self, width: int) -> float:
        return max(self.tau_k_ratio * width, self.tau_k_floor)

    def tau_m(self, width: int) -> float:
        return self.tau_m_at_512 * width / 512.0


@dataclass(frozen=True)
class TrackingResult:
    T_kc: Sim3Transform
    inliers: int
    final_energy: float
    iterations: int
    focal: float
    converged: bool
    initial_energy: float = 0.0
    inlier_mask: np.ndarray | None = None
    gate_mask: np.ndarray | None = None


# ---------------------------------------------------------------------------
# small rules


def percentile_70(values) -> float:
    """Nearest-rank 70th percentile."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = int(np.ceil(0.7 * v.size))
    return float(v[max(rank, 1) - 1])


def classify_frame(corr_count: int, displacements, width: int, cfg: FrontendConfig) -> FrameClass:
    if corr_count < cfg.tau_k(width):
        return FrameClass.KEYFRAME
    disp = np.asarray(displacements, dtype=float).ravel()
    if disp.size == 0:
        raise ClassificationError("no displacements for a frame with enough correspondences")
    if percentile_70(disp) > cfg.tau_m(width):
        return FrameClass.MAPPER
    return FrameClass.COMMON


def bootstrap_focal(estimates) -> float:
    est = np.asarray(estimates, dtype=float).ravel()
    if est.size == 0:
        raise ValueError("no focal estimates")
    return float(np.median(est))


def huber_weights(s: np.ndarray, delta: float, eps: float = 1e-9) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.where(s <= delta, 1.0, delta / (s + eps))


def huber_cost(s: np.ndarray, delta: float) -> np.ndarray:
    """Robust cost whose IRLS weights are :func:`huber_weights`."""
    s = np.asarray(s, dtype=float)
    return np.where(s <= delta, 0.5 * s * s, delta * s - 0.5 * delta * delta)


def gate_correspondence(Sigma_c, R_kc, J_pi, tau_det: float) -> bool:
    """Keep the correspondence iff det of its measurement-space covariance is at most ``tau_det``."""
    return bool(np.linalg.det(propagate_covariance(Sigma_c, R_kc, J_pi)) <= tau_det)


def gate_mask(corrs: CorrespondenceSet, covariances: np.ndarray, T_kc: Sim3Transform,
              K: CameraIntrinsics, tau_det: float) -> np.ndarray:
    P = T_kc.apply(corrs.P_c)
    front = P[:, 2] > 0
    keep = np.zeros(len(corrs), dtype=bool)
    if np.any(front):
        J = projection_jacobian(P[front], K.fx, K.fy)
        S = propagate_covariance(covariances[front], T_kc.R, J)
        keep[front] = np.linalg.det(S) <= tau_det
    return keep


def point_covariances(corrs: CorrespondenceSet, pointmap_points: np.ndarray, K: CameraIntrinsics,
                      cfg: FrontendConfig) -> np.ndarray:
    """Local covariances of each ``P_c`` from the current frame's pointmap."""
    if len(corrs) == 0:
        return np.zeros((0, 3, 3))
    radius = cfg.cov_radius_px * float(np.median(corrs.P_c[:, 2])) / K.fx
    return estimate_local_covariances(pointmap_points, corrs.P_c, radius)


# ---------------------------------------------------------------------------
# robust Sim(3) Gauss-Newton


class _Problem:
    def __init__(self, corrs: CorrespondenceSet, K: CameraIntrinsics, cfg: FrontendConfig,
                 optimize_focal: bool):
        self.corrs, self.K, self.cfg, self.optimize_focal = corrs, K, cfg, optimize_focal
        self.W = np.array([1.0, 1.0, cfg.w_logz])
        self.obs = np.column_stack([corrs.pix_k, np.log(corrs.P_k[:, 2])])

    def points_c(self, f: float) -> np.ndarray:
        if not self.optimize_focal:
            return self.corrs.P_c
        Kf = self.K.with_focal(f)
        return backproject(self.corrs.pix_c[:, 0], self.corrs.pix_c[:, 1], self.corrs.P_c[:, 2], Kf)

    def residuals(self, T: Sim3Transform, f: float) -> np.ndarray:
        P = T.apply(self.points_c(f))
        if np.any(P[:, 2] <= 0):
            raise BehindCameraError("transformed point behind keyframe camera")
        fx, fy = (f, f) if self.optimize_focal else (self.K.fx, self.K.fy)
        pred = np.column_stack([fx * P[:, 0] / P[:, 2] + self.K.cx,
                                fy * P[:, 1] / P[:, 2] + self.K.cy, np.log(P[:, 2])])
        return self.obs - pred

    def jacobian(self, T: Sim3Transform, f: float) -> np.ndarray:
        P = T.apply(self.points_c(f))
        fx, fy = (f, f) if self.optimize_focal else (self.K.fx, self.K.fy)
        Jp = projection_jacobian(P, fx, fy)
        J = -np.einsum("mij,mjk->mik", Jp, point_tangent_jacobian(P))
        if self.optimize_focal:
            Jf = -focal_jacobian(self.corrs.pix_c, self.corrs.P_c[:, 2], T, self.K, f)
            J = np.concatenate([J, Jf[:, :, None]], axis=2)
        return J

    def whitened_norm(self, r: np.ndarray) -> np.ndarray:
        return np.sqrt(np.einsum("mi,i,mi->m", r, self.W, r))

    def energy(self, r: np.ndarray) -> float:
        return float(np.sum(huber_cost(self.whitened_norm(r), self.cfg.huber_delta)))


def solve_damped(H: np.ndarray, g: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """Solve ``(H + lam trace(H)/d I) x = -g``; on failure add damping from 1e-6 doubling to 1e-2."""
    d = H.shape[0]
    scale = max(np.trace(H) / d, 1e-300)
    lams = [lam] if lam > 0 else [0.0]
    x = 1e-6
    while x <= 1e-2 + 1e-15:
        if x > lam:
            lams.append(x)
        x *= 2
    for lam_i in lams:
        A = H + lam_i * scale * np.eye(d)
        try:
            if np.linalg.cond(A) > 1e14:
                continue
            step = np.linalg.solve(A, -g)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(step)):
            return step
    raise np.linalg.LinAlgError("normal equations remain singular after damping")


def _irls(prob: "_Problem", T: Sim3Transform, f: float, active: np.ndarray, lam_cfg: FrontendConfig):
    """Levenberg-Marquardt on the Huber cost of the active correspondences."""
    cfg = lam_cfg
    r = prob.residuals(T, f)
    E = prob.energy(r[active])
    lam = 0.0
    increases = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        s = prob.whitened_norm(r)
        w = (huber_weights(s, cfg.huber_delta, cfg.huber_eps) * active)[:, None] * prob.W[None, :]
        J = prob.jacobian(T, f)
        H = np.einsum("mri,mr,mrj->ij", J, w, J)
        g = np.einsum("mri,mr,mr->i", J, w, r)
        try:
            step = solve_damped(H, g, lam)
        except np.linalg.LinAlgError:
            log.warning("tracking normal equations singular; stopping")
            break
        if np.linalg.norm(step) < cfg.eps:
            converged = True
            break
        T_new = sim3_exp(step[:7]).compose(T)
        f_new = f + step[7] if prob.optimize_focal else f
        try:
            if f_new <= 0:
                raise BehindCameraError("non-positive focal")
            r_new = prob.residuals(T_new, f_new)
            E_new = prob.energy(r_new[active])
        except BehindCameraError:
            E_new = np.inf
        if abs(E_new - E) <= 1e-13 * max(E, 1e-300):
            # the step is below what the energy can resolve in double precision
            T, f, r, E = T_new, f_new, r_new, min(E, E_new)
            converged = True
            break
        if E_new <= E:
            T, f, r, E = T_new, f_new, r_new, E_new
            increases = 0
            lam = 0.0 if lam <= 1e-6 else lam / 10.0
        else:
            increases += 1
            lam = 1e-6 if lam == 0 else lam * 10.0
            if increases >= 3:
                log.debug("tracking diverged after %d iterations", it)
                break
    return T, f, r, it, converged


def estimate_relative_pose(corrs: CorrespondenceSet, covariances: np.ndarray | None,
                           K: CameraIntrinsics, T_init: Sim3Transform, optimize_focal: bool = False,
                           cfg: FrontendConfig | None = None, focal: float | None = None
                           ) -> TrackingResult:
    """Robust weighted Gauss-Newton for ``T_kc`` (and optionally a shared focal length)."""
    cfg = cfg or FrontendConfig()
    f = float(K.fx if focal is None else focal)
    if covariances is not None and len(corrs):
        keep = gate_mask(corrs, np.asarray(covariances), T_init, K.with_focal(f) if optimize_focal else K,
                         cfg.tau_det)
    else:
        keep = np.ones(len(corrs), dtype=bool)
    if np.count_nonzero(keep) < cfg.min_corrs:
        raise InsufficientCorrespondencesError(
            f"{np.count_nonzero(keep)} gated correspondences, need {cfg.min_corrs}")
    sub = corrs.subset(keep)
    prob = _Problem(sub, K, cfg, optimize_focal)

    T = T_init
    r = prob.residuals(T, f)
    active = np.ones(len(sub), dtype=bool)
    E0 = prob.energy(r)
    it_total = 0
    converged = False
    # Huber IRLS to convergence, then drop correspondences whose whitened residual exceeds the
    # inlier threshold and re-solve; repeated until the retained set stops changing.
    for _ in range(cfg.max_gating_rounds):
        T, f, r, it, converged = _irls(prob, T, f, active, lam_cfg=cfg)
        it_total += it
        if not converged:
            break
        new_active = prob.whitened_norm(r) <= cfg.inlier_threshold
        if np.count_nonzero(new_active) < cfg.min_corrs or np.array_equal(new_active, active):
            break
        active = new_active
    E = prob.energy(r[active]) if np.any(active) else 0.0
    it = it_total

    s = prob.whitened_norm(r)
    inl_sub = (s <= cfg.inlier_threshold) & active
    inlier_mask = np.zeros(len(corrs), dtype=bool)
    inlier_mask[np.flatnonzero(keep)[inl_sub]] = True
    return TrackingResult(T, int(inl_sub.sum()), float(E), it, f, converged, float(E0),
                          inlier_mask, keep)


# ---------------------------------------------------------------------------
# stateful tracker


@dataclass(frozen=True)
class FrameEstimate:
    """Immutable tracking output handed to the backend and mapper."""

    frame_id: int
    keyframe_id: int
    T_kc: Sim3Transform
    frame_class: FrameClass
    corrs: CorrespondenceSet
    focal: float
    converged: bool
    n_valid: int
    # previous frame re-issued as a keyframe because this frame lost the old keyframe
    promoted: "FrameEstimate | None" = None


class Tracker:
    """Owns the latest keyframe reference and the running focal estimate."""

    def __init__(self, provider, cfg: FrontendConfig | None = None,
                 intrinsics: CameraIntrinsics | None = None):
        self.provider = provider
        self.cfg = cfg or FrontendConfig()
        self.K = intrinsics
        self.keyframe = None
        self.T_prev = Sim3Transform.identity()
        self.focal_estimates: list[float] = []
        self.focal: float | None = None
        self.optimize_focal = False
        self.focal_frozen = False
        self._last = None  # (frame, estimate) of the latest successfully tracked non-keyframe

    def _intrinsics(self, frame) -> CameraIntrinsics:
        if frame.intrinsics is not None:
            return frame.intrinsics
        if len(self.focal_estimates) < self.cfg.k_f:
            self.focal_estimates.append(self.provider.focal_estimate(frame))
            if len(self.focal_estimates) == self.cfg.k_f or self.focal is None:
                self.focal = bootstrap_focal(self.focal_estimates)
        self.optimize_focal = not self.focal_frozen
        W, H = frame.width, frame.height
        return CameraIntrinsics(self.focal, self.focal, (W - 1) / 2.0, (H - 1) / 2.0, W, H)

    def freeze_focal(self) -> None:
        if self.cfg.freeze_focal_after_loop:
            self.focal_frozen = True

    def track(self, frame) -> FrameEstimate:
        K = self._intrinsics(frame)
        self.K = K
        if self.keyframe is None:
            self.keyframe = frame
            self.T_prev = Sim3Transform.identity()
            empty = CorrespondenceSet(frame.id, frame.id)
            est = FrameEstimate(frame.id, frame.id, Sim3Transform.identity(), FrameClass.KEYFRAME,
                                empty, K.fx, True, 0)
            self._last = None
            return est
        try:
            est = self._track_against_keyframe(frame, K)
        except (InsufficientCorrespondencesError, BehindCameraError) as e:
            last = self._last
            if last is None:
                # tracking lost with no fallback: keyframe at the last known relative pose
                log.warning("frame %d: %s", frame.id, e)
                est = FrameEstimate(frame.id, self.keyframe.id, self.T_prev, FrameClass.KEYFRAME,
                                    CorrespondenceSet(frame.id, self.keyframe.id), K.fx, False, 0)
                self._new_keyframe(frame)
                return est
            # the previous frame still overlaps: make it the keyframe and track against it
            prev_frame, prev_est = last
            promoted = dataclasses.replace(prev_est, frame_class=FrameClass.KEYFRAME)
            log.info("frame %d: %s; promoting frame %d to keyframe", frame.id, e, prev_frame.id)
            self._new_keyframe(prev_frame)
            try:
                est = self._track_against_keyframe(frame, K)
            except (InsufficientCorrespondencesError, BehindCameraError) as e2:
                log.warning("frame %d: %s", frame.id, e2)
                est = FrameEstimate(frame.id, prev_frame.id, Sim3Transform.identity(),
                                    FrameClass.KEYFRAME, CorrespondenceSet(frame.id, prev_frame.id),
                                    K.fx, False, 0)
                self._new_keyframe(frame)
            est = dataclasses.replace(est, promoted=promoted)
        return est

    def _track_against_keyframe(self, frame, K: CameraIntrinsics) -> FrameEstimate:
        pm_c, _, corrs = self.provider.match(frame, self.keyframe)
        pix, pts = pm_c.valid_pixels()
        cov = point_covariances(corrs, pts, K, self.cfg)
        kf_id = self.keyframe.id
        res = estimate_relative_pose(corrs, cov, K, self.T_prev, self.optimize_focal, self.cfg,
                                     focal=K.fx)
        if self.optimize_focal:
            self.focal = res.focal
        valid = corrs.subset(res.inlier_mask)
        if not res.converged:
            cls = FrameClass.COMMON
        else:
            cls = classify_frame(res.inliers, valid.displacements(), frame.width, self.cfg)
        self.T_prev = res.T_kc
        est = FrameEstimate(frame.id, kf_id, res.T_kc, cls, valid, res.focal, res.converged,
                            res.inliers)
        if cls is FrameClass.KEYFRAME:
            self._new_keyframe(frame)
        else:
            self._last = (frame, est) if res.converged else None
        return est

    def _new_keyframe(self, frame) -> None:
        self.keyframe = frame
        self.T_prev = Sim3Transform.identity()
        self._last = None
