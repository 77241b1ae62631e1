"""Sim(3) group, log-depth pinhole projection and first-order covariance transport.

Tangent vectors of Sim(3) are ordered ``(v, omega, sigma)``: translation part,
rotation vector, log-scale. Updates are left-multiplicative,
``T <- exp(xi) * T``, so the derivative of ``exp(xi) * P`` at ``xi = 0`` is
``[I, -[P]x, P]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-6
SIGMA_MIN = 1e-3
MIN_NEIGHBORS = 4


class BehindCameraError(ValueError):
    """A point that must be projected has non-positive depth."""


# --------------------------------------------------------------------------
# quaternions (w, x, y, z)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical hemisphere keeps log() continuous
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly batched) unit quaternions."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return quat_normalize(np.roll(xyzw, 1, axis=-1))


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    z = np.zeros(w.shape[:-1])
    x, y, zz = w[..., 0], w[..., 1], w[..., 2]
    return np.stack([z, -zz, y, zz, z, -x, -y, x, z], axis=-1).reshape(w.shape[:-1] + (3, 3))


def so3_exp_quat(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w = q[..., :1]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < SMALL_ANGLE
    safe = np.where(small, 1.0, n)
    k = np.where(small, 2.0 / w - 2.0 * n**2 / (3.0 * w**3), 2.0 * np.arctan2(n, w) / safe)
    return k * v


# --------------------------------------------------------------------------
# Sim(3)


def _w_coefficients(sigma: float, theta: float) -> tuple[float, float, float]:
    """Coefficients of W = A I + B W + C W^2 with W = int_0^1 exp(tau (sigma I + [w]x)) dtau."""
    if abs(sigma) < SMALL_ANGLE:
        A = 1.0 + sigma / 2.0 + sigma * sigma / 6.0
    else:
        A = np.expm1(sigma) / sigma
    if theta < SMALL_ANGLE:
        if abs(sigma) < 1e-3:
            B = 0.5 + sigma / 3.0 + sigma**2 / 8.0 + sigma**3 / 30.0
            C = 1.0 / 6.0 + sigma / 8.0 + sigma**2 / 20.0 + sigma**3 / 72.0
        else:
            es = np.exp(sigma)
            B = (es * (sigma - 1.0) + 1.0) / sigma**2
            C = (es * (sigma**2 - 2.0 * sigma + 2.0) - 2.0) / (2.0 * sigma**3)
        return A, B, C
    # (e^z - 1) / z with z = sigma + i theta, written to avoid cancellation
    em1 = complex(
        np.expm1(sigma) * np.cos(theta) - 2.0 * np.sin(0.5 * theta) ** 2,
        np.exp(sigma) * np.sin(theta),
    )
    g = em1 / complex(sigma, theta)
    return A, g.imag / theta, (A - g.real) / theta**2


def _w_matrix(sigma: float, omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    A, B, C = _w_coefficients(float(sigma), theta)
    Om = skew(omega)
    return A * np.eye(3) + B * Om + C * (Om @ Om)


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform ``P -> s R P + t``; rotation kept as a unit quaternion."""

    s: float = 1.0
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float).reshape(4)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls()

    @classmethod
    def from_matrix(cls, s: float, R: np.ndarray, t: np.ndarray) -> "Sim3Transform":
        return cls(s, matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def center(self) -> np.ndarray:
        """Position of the frame origin, i.e. ``t``."""
        return self.t

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T

    def apply(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        return self.s * (P @ self.R.T) + self.t

    def rotate(self, d: np.ndarray) -> np.ndarray:
        """Apply only the linear part ``s R``."""
        return self.s * (np.asarray(d, dtype=float) @ self.R.T)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        q = quat_normalize(quat_mul(self.q, other.q))
        return Sim3Transform(self.s * other.s, q, self.apply(other.t))

    __matmul__ = compose

    def inverse(self) -> "Sim3Transform":
        inv_s = 1.0 / self.s
        q = quat_conj(self.q)
        return Sim3Transform(inv_s, q, -inv_s * (self.R.T @ self.t))

    def log(self) -> np.ndarray:
        sigma = np.log(self.s)
        omega = so3_log_quat(self.q)
        v = np.linalg.solve(_w_matrix(sigma, omega), self.t)
        return np.concatenate([v, omega, [sigma]])

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Sim3Transform":
        xi = np.asarray(xi, dtype=float).reshape(7)
        v, omega, sigma = xi[:3], xi[3:6], xi[6]
        return cls(np.exp(sigma), so3_exp_quat(omega), _w_matrix(sigma, omega) @ v)

    def __repr__(self) -> str:
        return f"Sim3Transform(s={self.s:.6g}, q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


def sim3_exp(xi: np.ndarray) -> Sim3Transform:
    return Sim3Transform.exp(xi)


def sim3_log(T: Sim3Transform) -> np.ndarray:
    return T.log()


def sim3_apply(T: Sim3Transform, P: np.ndarray) -> np.ndarray:
    return T.apply(P)


def sim3_compose(A: Sim3Transform, B: Sim3Transform) -> Sim3Transform:
    return A.compose(B)


def sim3_inverse(T: Sim3Transform) -> Sim3Transform:
    return T.inverse()


def pose_error(T: Sim3Transform, T_ref: Sim3Transform) -> float:
    """``||log(T^-1 T_ref)||``."""
    return float(np.linalg.norm(T.inverse().compose(T_ref).log()))


def point_tangent_jacobian(P: np.ndarray) -> np.ndarray:
    """d(exp(xi) P)/dxi at xi = 0, batched: (..., 3) -> (..., 3, 7)."""
    P = np.asarray(P, dtype=float)
    eye = np.broadcast_to(np.eye(3), P.shape[:-1] + (3, 3))
    return np.concatenate([eye, -skew(P), P[..., None]], axis=-1)


# --------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_focal(self, f: float) -> "CameraIntrinsics":
        return CameraIntrinsics(f, f, self.cx, self.cy, self.width, self.height)

    def downsampled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of the image averaged over 2^level x 2^level blocks."""
        k = 2**level
        w, h = self.width // k, self.height // k
        return CameraIntrinsics(
            self.fx / k, self.fy / k, (self.cx + 0.5) / k - 0.5, (self.cy + 0.5) / k - 0.5, w, h
        )


@dataclass(frozen=True)
class LogDepthMeasurement:
    u: float
    v: float
    log_z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.log_z])


def _check_depth(Z: np.ndarray) -> None:
    if np.any(~(np.asarray(Z) > 0)):
        raise BehindCameraError("point has non-positive depth")


def project_points(P: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Batched log-depth projection, (..., 3) -> (..., 3) of (u, v, ln Z)."""
    P = np.asarray(P, dtype=float)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    _check_depth(Z)
    return np.stack([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy, np.log(Z)], axis=-1)


def project_log_depth(P: np.ndarray, K: CameraIntrinsics) -> LogDepthMeasurement:
    u, v, lz = project_points(np.asarray(P, dtype=float).reshape(3), K)
    return LogDepthMeasurement(float(u), float(v), float(lz))


def backproject(u, v, Z, K: CameraIntrinsics) -> np.ndarray:
    """Inverse of the projection at depth ``Z``; broadcasts over inputs."""
    u, v, Z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, Z)))
    return np.stack([(u - K.cx) / K.fx * Z, (v - K.cy) / K.fy * Z, Z], axis=-1)


def unproject_log_depth(m: LogDepthMeasurement, K: CameraIntrinsics) -> np.ndarray:
    return backproject(m.u, m.v, np.exp(m.log_z), K)


def projection_jacobian(P: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Batched d(u, v, ln Z)/d(X, Y, Z): (..., 3) -> (..., 3, 3)."""
    P = np.asarray(P, dtype=float)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    _check_depth(Z)
    zero = np.zeros_like(Z)
    iz = 1.0 / Z
    rows = [
        fx * iz, zero, -fx * X * iz * iz,
        zero, fy * iz, -fy * Y * iz * iz,
        zero, zero, iz,
    ]
    return np.stack(rows, axis=-1).reshape(P.shape[:-1] + (3, 3))


def jacobian_wrt_point(P: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return projection_jacobian(np.asarray(P, dtype=float).reshape(3), K.fx, K.fy)


def focal_jacobian(pix_c: np.ndarray, Z_c: np.ndarray, T_kc: Sim3Transform, K: CameraIntrinsics,
                   f: float | None = None) -> np.ndarray:
    """Batched d(u_k, v_k, ln Z_k)/df for the reproject pipeline with f_x = f_y = f.

    The current-frame point is rebuilt from its pixel and depth with focal ``f``,
    mapped into the keyframe by ``T_kc`` and projected with the same ``f``.
    Returns (..., 3).
    """
    f = K.fx if f is None else float(f)
    pix_c = np.asarray(pix_c, dtype=float)
    Z_c = np.asarray(Z_c, dtype=float)
    P_c = np.stack(
        [(pix_c[..., 0] - K.cx) / f * Z_c, (pix_c[..., 1] - K.cy) / f * Z_c, Z_c], axis=-1
    )
    P_k = T_kc.apply(P_c)
    _check_depth(P_k[..., 2])
    direct = np.stack(
        [P_k[..., 0] / P_k[..., 2], P_k[..., 1] / P_k[..., 2], np.zeros(P_k.shape[:-1])], axis=-1
    )
    dPc_df = np.stack(
        [-(pix_c[..., 0] - K.cx) / f**2 * Z_c, -(pix_c[..., 1] - K.cy) / f**2 * Z_c,
         np.zeros_like(Z_c)],
        axis=-1,
    )
    dPk_df = T_kc.rotate(dPc_df)
    J = projection_jacobian(P_k, f, f)
    return direct + np.einsum("...ij,...j->...i", J, dPk_df)


def jacobian_wrt_focal(pixel_c, Z_c: float, T_kc: Sim3Transform, K: CameraIntrinsics) -> np.ndarray:
    return focal_jacobian(np.asarray(pixel_c, dtype=float).reshape(2), float(Z_c), T_kc, K)


# --------------------------------------------------------------------------
# covariance


def propagate_covariance(Sigma_c: np.ndarray, R_kc: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Measurement-space covariance ``J R Sigma R^T J^T`` (batched over leading axes)."""
    A = np.asarray(J, dtype=float) @ np.asarray(R_kc, dtype=float)
    out = A @ np.asarray(Sigma_c, dtype=float) @ np.swapaxes(A, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _floor_covariance(cov: np.ndarray, n_neighbors: np.ndarray) -> np.ndarray:
    lam_min = np.linalg.eigvalsh(cov)[..., 0]
    bad = (n_neighbors < MIN_NEIGHBORS) | (lam_min < 1e-12)
    return np.where(bad[..., None, None], cov + SIGMA_MIN**2 * np.eye(3), cov)


def local_covariance_raw(points: np.ndarray, center: np.ndarray, radius: float) -> tuple[np.ndarray, int]:
    """Sample covariance of the points within ``radius`` of ``center`` and their count."""
    points = np.asarray(points, dtype=float)
    d = np.linalg.norm(points - center, axis=1)
    nb = points[d <= radius]
    if len(nb) < 2:
        return np.zeros((3, 3)), len(nb)
    return np.cov(nb.T, bias=True), len(nb)


def estimate_local_covariance(points: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    cov, n = local_covariance_raw(points, center, radius)
    return _floor_covariance(cov, np.asarray(n))


def estimate_local_covariances(points: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    """Batched version backed by a KD-tree; ``centers`` need not be members of ``points``."""
    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    out = np.zeros((len(centers), 3, 3))
    counts = np.zeros(len(centers), dtype=int)
    if len(points) == 0:
        return _floor_covariance(out, counts)
    tree = cKDTree(points)
    for i, idx in enumerate(tree.query_ball_point(centers, r=radius)):
        counts[i] = len(idx)
        if len(idx) >= 2:
            out[i] = np.cov(points[idx].T, bias=True)
    return _floor_covariance(out, counts)
