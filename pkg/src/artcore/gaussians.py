"""Hierarchical Gaussian scene store: LoG-driven insertion, primitive initialisation,
voxel region features with small MLP refiners, and distance-based level-of-detail."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Sim3Transform, quat_mul, quat_normalize, quat_to_matrix
from .providers.base import Pointmap

SH_C0 = 0.28209479177387814
TAU_A = 0.1
LOG_SIGMA = 1.5
R_MIN = 1e-4
FEATURE_DIM = 16
HIDDEN = 32
OPACITY_INIT = 0.2
LEVEL_SCALE = 1.4
VOXEL_FACTOR = 8.0
FEATURE_INIT_STD = 0.1  # individual features; region features start at zero
_VOX_BITS = 21
_VOX_OFFSET = 1 << 20


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


def sh_to_rgb(sh):
    return SH_C0 * np.asarray(sh, dtype=float) + 0.5


# ---------------------------------------------------------------------------
# LoG insertion


def log_kernel(sigma: float = LOG_SIGMA) -> np.ndarray:
    """Discrete Laplacian-of-Gaussian on a (2r+1)^2 grid, r = ceil(3 sigma), shifted to zero sum."""
    r = int(math.ceil(3 * sigma))
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    rr = x * x + y * y
    g = np.exp(-rr / (2 * sigma * sigma)) / (2 * np.pi * sigma * sigma)
    k = g * (rr - 2 * sigma * sigma) / sigma ** 4
    return k - k.mean()


def log_magnitude(image: np.ndarray, sigma: float = LOG_SIGMA) -> np.ndarray:
    """Per-pixel L2 norm over channels of the LoG response (reflected boundary)."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    k = log_kernel(sigma)
    resp = np.stack([ndimage.convolve(img[..., c], k, mode="reflect") for c in range(img.shape[2])],
                    axis=-1)
    return np.sqrt(np.sum(resp * resp, axis=-1))


@dataclass(frozen=True)
class InsertionMask:
    prob: np.ndarray  # P_a in [0, 1]
    selected: np.ndarray  # P_a > tau_a
    tau_a: float = TAU_A


def insertion_probability(image: np.ndarray, rendered: np.ndarray, sigma: float = LOG_SIGMA,
                          tau_a: float = TAU_A) -> InsertionMask:
    image = np.asarray(image, dtype=float)
    rendered = np.asarray(rendered, dtype=float)
    if image.shape != rendered.shape:
        raise ValueError(f"image {image.shape} and render {rendered.shape} differ in size")
    a = np.minimum(log_magnitude(image, sigma), 1.0)
    b = np.minimum(log_magnitude(rendered, sigma), 1.0)
    p = np.maximum(a - b, 0.0)
    return InsertionMask(p, p > tau_a, tau_a)


def base_scale(d, log_response, f: float, r_min: float = R_MIN):
    """``S_b = d s' / f`` with ``s' = 1 / (2 sqrt(max(min(response, 1), r_min)))``."""
    r = np.maximum(np.minimum(np.asarray(log_response, dtype=float), 1.0), r_min)
    s_img = 1.0 / (2.0 * np.sqrt(r))
    out = np.asarray(d, dtype=float) * s_img / f
    return float(out) if out.ndim == 0 else out


def image_space_scale(log_response, r_min: float = R_MIN):
    r = np.maximum(np.minimum(np.asarray(log_response, dtype=float), 1.0), r_min)
    out = 1.0 / (2.0 * np.sqrt(r))
    return float(out) if out.ndim == 0 else out


def level_scale_weight(level: int) -> float:
    return LEVEL_SCALE ** (2 * level)


def level_cutoff(d, level: int):
    return d * 2.0 ** (2 * level)


# ---------------------------------------------------------------------------
# pyramids


def downsample_image(img: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    img = img[:H - H % 2, :W - W % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def downsample_pointmap(pm: Pointmap, conf: np.ndarray | None = None
                        ) -> tuple[Pointmap, np.ndarray | None]:
    """Average of the valid points in each 2x2 block; a block with no valid point is invalid."""
    H, W = pm.shape
    H2, W2 = H // 2, W // 2
    v = pm.valid[:2 * H2, :2 * W2].reshape(H2, 2, W2, 2).astype(float)
    cnt = v.sum(axis=(1, 3))
    ok = cnt > 0
    den = np.maximum(cnt, 1.0)

    def pool(a):
        a = a[:2 * H2, :2 * W2].reshape(H2, 2, W2, 2, *a.shape[2:])
        w = v.reshape(H2, 2, W2, 2, *([1] * (a.ndim - 4)))
        return (a * w).sum(axis=(1, 3)) / den.reshape(H2, W2, *([1] * (a.ndim - 4)))

    pts = np.where(ok[..., None], pool(np.where(pm.valid[..., None], pm.points, 0.0)), 0.0)
    pts[~ok] = (0.0, 0.0, 1.0)
    out = Pointmap(pts, ok, np.where(ok, pool(np.where(pm.valid, pm.raw_conf, 0.0)), 0.0))
    c2 = None if conf is None else np.where(ok, pool(np.where(pm.valid, conf, 0.0)), 0.0)
    return out, c2


@dataclass
class PyramidLevel:
    level: int
    image: np.ndarray
    rendered: np.ndarray
    pointmap: Pointmap
    confidence: np.ndarray
    mask: InsertionMask
    log_mag: np.ndarray


def build_lod_pyramid(image: np.ndarray, pointmap: Pointmap, rendered: np.ndarray, confidence,
                      L: int = 4, sigma: float = LOG_SIGMA, tau_a: float = TAU_A) -> list[PyramidLevel]:
    """Per-level images, pointmaps and insertion masks; level ``l`` is ``l`` times 2x downsampled.
    ``rendered`` is the full-resolution render and is downsampled the same way as ``image``."""
    if L < 1:
        raise ValueError("L must be at least 1")
    conf = np.ones(pointmap.shape) if confidence is None else np.asarray(confidence, dtype=float)
    img, ren, pm = np.asarray(image, dtype=float), np.asarray(rendered, dtype=float), pointmap
    out = []
    for level in range(L):
        if level > 0:
            if min(img.shape[:2]) < 2:
                break
            img, ren = downsample_image(img), downsample_image(ren)
            pm, conf = downsample_pointmap(pm, conf)
        mask = insertion_probability(img, ren, sigma, tau_a)
        out.append(PyramidLevel(level, img, ren, pm, conf, mask, log_magnitude(img, sigma)))
    return out


# ---------------------------------------------------------------------------
# voxel grid


def voxel_coords(mu: np.ndarray, eps: float) -> np.ndarray:
    return np.floor(np.asarray(mu, dtype=float) / eps).astype(np.int64)


def pack_voxel(ijk: np.ndarray) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64)
    if np.any(ijk < -_VOX_OFFSET) or np.any(ijk >= _VOX_OFFSET):
        raise ValueError("voxel coordinate outside the packable range")
    u = (ijk + _VOX_OFFSET).astype(np.uint64)
    return (u[..., 0] << np.uint64(2 * _VOX_BITS)) | (u[..., 1] << np.uint64(_VOX_BITS)) | u[..., 2]


def unpack_voxel(key) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint64)
    m = np.uint64((1 << _VOX_BITS) - 1)
    parts = [(key >> np.uint64(2 * _VOX_BITS)) & m, (key >> np.uint64(_VOX_BITS)) & m, key & m]
    return np.stack(parts, axis=-1).astype(np.int64) - _VOX_OFFSET


class VoxelGrid:
    """Sparse cells of size ``eps`` each holding a trainable region feature (zero at creation)."""

    def __init__(self, eps: float, dim: int = FEATURE_DIM):
        if not eps > 0:
            raise ValueError("voxel size must be positive")
        self.eps = float(eps)
        self.dim = dim
        self._rows: dict[int, int] = {}
        self.keys: list[int] = []
        self.features = np.zeros((0, dim))

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return int(key) in self._rows

    def keys_for(self, mu: np.ndarray) -> np.ndarray:
        return pack_voxel(voxel_coords(mu, self.eps))

    def ensure(self, keys: np.ndarray) -> np.ndarray:
        """Row index of each key, creating zero-feature cells for new keys."""
        rows = np.empty(len(keys), dtype=np.int64)
        new = 0
        for n, k in enumerate(np.asarray(keys, dtype=np.uint64).tolist()):
            r = self._rows.get(k)
            if r is None:
                r = len(self.keys)
                self._rows[k] = r
                self.keys.append(k)
                new += 1
            rows[n] = r
        if new:
            self.features = np.vstack([self.features, np.zeros((new, self.dim))])
        return rows

    def rows(self, keys: np.ndarray) -> np.ndarray:
        return np.array([self._rows[k] for k in np.asarray(keys, dtype=np.uint64).tolist()],
                        dtype=np.int64)


# ---------------------------------------------------------------------------
# refiners


def _quat_to_tangent_map(q: np.ndarray) -> np.ndarray:
    """(N, 3, 4) matrices E with omega = E dq for a unit quaternion q (left angular velocity)."""
    qc = q * np.array([1.0, -1.0, -1.0, -1.0])
    basis = np.eye(4)
    cols = [2.0 * quat_mul(np.broadcast_to(basis[k], q.shape), qc)[:, 1:] for k in range(4)]
    return np.stack(cols, axis=-1)


class RefinerMLP:
    """Two-layer tanh network on ``f_r (+) f_l``.

    ``kind='scale'`` returns ``exp(W2 h + b2)``; ``kind='rotation'`` returns the normalised
    ``W2 h + b2``. With ``W2 = 0`` the outputs are ``(1, 1, 1)`` and the identity quaternion
    for every input.
    """

    def __init__(self, kind: str, in_dim: int = 2 * FEATURE_DIM, hidden: int = HIDDEN,
                 rng: np.random.Generator | None = None):
        if kind not in ("scale", "rotation"):
            raise ValueError(f"unknown refiner kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.in_dim = in_dim
        out = 3 if kind == "scale" else 4
        self.params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(in_dim), (hidden, in_dim)),
            "b1": np.zeros(hidden),
            "W2": np.zeros((out, hidden)),
            "b2": np.zeros(out) if kind == "scale" else np.array([1.0, 0.0, 0.0, 0.0]),
        }

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"refiner expects features of size {self.in_dim}, got {x.shape[-1]}")
        return x

    def forward(self, x: np.ndarray):
        x = self._check(x)
        single = x.ndim == 1
        X = x.reshape(-1, self.in_dim)
        p = self.params
        h = np.tanh(X @ p["W1"].T + p["b1"])
        z = h @ p["W2"].T + p["b2"]
        if self.kind == "scale":
            y = np.exp(z)
        else:
            y = z / np.linalg.norm(z, axis=1, keepdims=True)
        cache = (X, h, z, y)
        return (y[0] if single else y), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dy: np.ndarray):
        """Gradients of a scalar loss w.r.t. parameters and inputs given ``dL/dy``."""
        X, h, z, y = cache
        dy = np.asarray(dy, dtype=float).reshape(y.shape)
        if self.kind == "scale":
            dz = dy * y
        else:
            n = np.linalg.norm(z, axis=1, keepdims=True)
            dz = (dy - y * np.sum(dy * y, axis=1, keepdims=True)) / n
        p = self.params
        grads = {"W2": dz.T @ h, "b2": dz.sum(axis=0)}
        dpre = (dz @ p["W2"]) * (1.0 - h * h)
        grads["W1"] = dpre.T @ X
        grads["b1"] = dpre.sum(axis=0)
        return grads, dpre @ p["W1"]

    def rotation_backward(self, cache, g_theta: np.ndarray):
        """Backward from a left rotation-tangent gradient on the output rotation."""
        X, h, z, y = cache
        dy = np.einsum("nk,nkj->nj", g_theta, _quat_to_tangent_map(y))
        return self.backward(cache, dy)


def refine_scale(mlp: RefinerMLP, feature: np.ndarray) -> np.ndarray:
    if mlp.kind != "scale":
        raise ValueError("not a scale refiner")
    return mlp(feature)


def refine_rot(mlp: RefinerMLP, feature: np.ndarray) -> np.ndarray:
    if mlp.kind != "rotation":
        raise ValueError("not a rotation refiner")
    return mlp(feature)


# ---------------------------------------------------------------------------
# the map


@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    color: np.ndarray  # SH0 coefficients
    alpha: float
    S_b: float
    S: np.ndarray
    R: np.ndarray  # unit quaternion (w, x, y, z)
    f_l: np.ndarray
    v_id: int
    level: int
    d_max: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("opacity outside [0, 1]")
        if np.any(np.asarray(self.S) <= 0) or not self.d_max > 0:
            raise ValueError("scales and d_max must be positive")


@dataclass
class MapConfig:
    levels: int = 4
    tau_a: float = TAU_A
    log_sigma: float = LOG_SIGMA
    r_min: float = R_MIN
    feature_dim: int = FEATURE_DIM
    voxel_size: float | None = None  # None: VOXEL_FACTOR x median level-0 S_b of first insertion
    literal_fade: bool = False
    seed: int = 0


@dataclass
class InsertionRecord:
    frame_id: int
    level: int
    u: int
    v: int
    p_a: float


_ARRAYS = ("mu", "sh", "alpha", "S_b", "rot_res", "f_l", "v_id", "level", "d_max", "uid")


class GaussianMap:
    """Structure-of-arrays primitive store; the mapper thread is the only writer."""

    def __init__(self, cfg: MapConfig | None = None):
        self.cfg = cfg or MapConfig()
        F = self.cfg.feature_dim
        rng = np.random.default_rng([self.cfg.seed, 7])
        self.scale_mlp = RefinerMLP("scale", 2 * F, rng=rng)
        self.rot_mlp = RefinerMLP("rotation", 2 * F, rng=rng)
        self.grid: VoxelGrid | None = None
        self.mu = np.zeros((0, 3))
        self.sh = np.zeros((0, 3))
        self.alpha = np.zeros(0)
        self.S_b = np.zeros(0)
        self.rot_res = np.zeros((0, 4))
        self.f_l = np.zeros((0, F))
        self.v_id = np.zeros(0, dtype=np.uint64)
        self.vrow = np.zeros(0, dtype=np.int64)
        self.level = np.zeros(0, dtype=np.int64)
        self.d_max = np.zeros(0)
        self.uid = np.zeros(0, dtype=np.int64)
        self.insertions: list[InsertionRecord] = []
        self._next_uid = 0
        self._feat_rng = np.random.default_rng([self.cfg.seed, 8])

    def __len__(self) -> int:
        return len(self.mu)

    # ---- derived attributes

    def features(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 2 * self.cfg.feature_dim))
        return np.concatenate([self.grid.features[self.vrow], self.f_l], axis=1)

    def effective(self):
        """(scales, rotation quaternions, caches) after the MLP refiners."""
        f = self.features()
        m, c_s = self.scale_mlp.forward(f)
        q_mlp, c_r = self.rot_mlp.forward(f)
        S = self.S_b[:, None] * m
        q = quat_normalize(quat_mul(q_mlp, self.rot_res)) if len(self) else np.zeros((0, 4))
        return S, q, (m, q_mlp, c_s, c_r)

    def colors(self) -> np.ndarray:
        return sh_to_rgb(self.sh)

    def counts_per_level(self) -> list[int]:
        return [int(np.count_nonzero(self.level == l)) for l in range(self.cfg.levels)]

    # ---- insertion

    def _append(self, mu, sh, alpha, S_b, level, d_max, f_l=None, rot_res=None):
        n = len(mu)
        F = self.cfg.feature_dim
        keys = self.grid.keys_for(mu)
        rows = self.grid.ensure(keys)
        self.mu = np.vstack([self.mu, mu])
        self.sh = np.vstack([self.sh, sh])
        self.alpha = np.concatenate([self.alpha, alpha])
        self.S_b = np.concatenate([self.S_b, S_b])
        self.rot_res = np.vstack([self.rot_res, np.tile([1.0, 0, 0, 0], (n, 1)) if rot_res is None
                                  else rot_res])
        if f_l is None:
            f_l = self._feat_rng.normal(0.0, FEATURE_INIT_STD, (n, F))
        self.f_l = np.vstack([self.f_l, f_l])
        self.v_id = np.concatenate([self.v_id, keys])
        self.vrow = np.concatenate([self.vrow, rows])
        self.level = np.concatenate([self.level, np.full(n, level, dtype=np.int64)
                                     if np.isscalar(level) else np.asarray(level, dtype=np.int64)])
        self.d_max = np.concatenate([self.d_max, d_max])
        self.uid = np.concatenate([self.uid, np.arange(self._next_uid, self._next_uid + n)])
        self._next_uid += n
        return np.arange(len(self) - n, len(self))

    def ensure_grid(self, level0_sb: np.ndarray) -> None:
        if self.grid is not None:
            return
        eps = self.cfg.voxel_size
        if eps is None:
            eps = VOXEL_FACTOR * float(np.median(level0_sb)) if len(level0_sb) else 1.0
        self.grid = VoxelGrid(eps, self.cfg.feature_dim)

    def insert_frame(self, frame_id: int, image: np.ndarray, pointmap: Pointmap, rendered: np.ndarray,
                     confidence, T_wc: Sim3Transform, focal: float) -> int:
        """Insert primitives wherever ``P_a > tau_a`` on every pyramid level; returns the count."""
        pyr = build_lod_pyramid(image, pointmap, rendered, confidence, self.cfg.levels,
                                self.cfg.log_sigma, self.cfg.tau_a)
        batches = [initialize_level(p, T_wc, focal, self.cfg.r_min) for p in pyr]
        if self.grid is None:
            lvl0 = batches[0]["S_b"] if len(batches[0]["S_b"]) else np.concatenate(
                [b["S_b"] for b in batches])
            self.ensure_grid(lvl0)
        added = 0
        for p, b in zip(pyr, batches):
            if len(b["mu"]) == 0:
                continue
            self._append(b["mu"], b["sh"], b["alpha"], b["S_b"], p.level, b["d_max"])
            for (u, v), pa in zip(b["pixels"], b["p_a"]):
                self.insertions.append(InsertionRecord(frame_id, p.level, int(u), int(v), float(pa)))
            added += len(b["mu"])
        return added

    def primitive(self, i: int) -> GaussianPrimitive:
        S, q, _ = self.effective()
        return GaussianPrimitive(self.mu[i].copy(), self.sh[i].copy(), float(self.alpha[i]),
                                 float(self.S_b[i]), S[i], q[i], self.f_l[i].copy(),
                                 int(self.v_id[i]), int(self.level[i]), float(self.d_max[i]))

    # ---- snapshots

    def snapshot(self) -> "MapSnapshot":
        S, q, _ = self.effective()
        return MapSnapshot(self.mu.copy(), self.colors(), self.alpha.copy(), S, q,
                           self.d_max.copy(), self.level.copy(), self.v_id.copy(), self.uid.copy())


def initialize_level(p: PyramidLevel, T_wc: Sim3Transform, focal: float, r_min: float = R_MIN) -> dict:
    """Attribute arrays for every selected and valid pixel of one pyramid level."""
    sel = p.mask.selected & p.pointmap.valid
    v, u = np.nonzero(sel)
    X = p.pointmap.points[v, u]
    mu = T_wc.apply(X) if len(X) else np.zeros((0, 3))
    d = np.linalg.norm(mu - T_wc.t, axis=1)
    S_b = base_scale(d, p.log_mag[v, u], focal, r_min) * level_scale_weight(p.level)
    conf = np.asarray(p.confidence)[v, u]
    return {
        "pixels": np.stack([u, v], axis=1),
        "mu": mu,
        "sh": rgb_to_sh(p.image[v, u]),
        "alpha": OPACITY_INIT * conf,
        "S_b": np.atleast_1d(S_b),
        "d_max": level_cutoff(d, p.level),
        "p_a": p.mask.prob[v, u],
    }


def init_primitive(pixel, pointmap: Pointmap, image: np.ndarray, C: float, level: int,
                   grid: VoxelGrid, refiners: tuple[RefinerMLP, RefinerMLP], T_wc: Sim3Transform,
                   focal: float, log_response: float, r_min: float = R_MIN,
                   rng: np.random.Generator | None = None) -> GaussianPrimitive:
    """One primitive from a valid pixel of a (possibly downsampled) pointmap.

    The individual feature is drawn from ``rng`` (zero without one); refiners with a zero
    output layer map any feature to the identity.
    """
    u, v = int(pixel[0]), int(pixel[1])
    if not pointmap.valid[v, u]:
        raise ValueError(f"pixel ({u}, {v}) is not valid in the pointmap")
    mu = T_wc.apply(pointmap.points[v, u])
    d = float(np.linalg.norm(mu - T_wc.t))
    S_b = base_scale(d, log_response, focal, r_min) * level_scale_weight(level)
    key = grid.keys_for(mu[None])[0]
    row = grid.ensure(np.array([key], dtype=np.uint64))[0]
    f_l = np.zeros(grid.dim) if rng is None else rng.normal(0.0, FEATURE_INIT_STD, grid.dim)
    feat = np.concatenate([grid.features[row], f_l])
    scale_mlp, rot_mlp = refiners
    S = S_b * refine_scale(scale_mlp, feat)
    R = refine_rot(rot_mlp, feat)
    return GaussianPrimitive(mu, rgb_to_sh(image[v, u]), OPACITY_INIT * C, S_b, S, R, f_l,
                             int(key), level, level_cutoff(d, level))


# ---------------------------------------------------------------------------
# level of detail


def fade_weights(d_r, d_max, literal: bool = False) -> np.ndarray:
    """1 inside ``d_max``, linear fade to 0 at ``2 d_max``, 0 beyond."""
    d_r = np.asarray(d_r, dtype=float)
    d_max = np.asarray(d_max, dtype=float)
    fade = (d_r - d_max) / d_max if literal else (2.0 * d_max - d_r) / d_max
    return np.where(d_r <= d_max, 1.0, np.where(d_r <= 2.0 * d_max, fade, 0.0))


def fade_slope(d_r, d_max, literal: bool = False) -> np.ndarray:
    """Derivative of :func:`fade_weights` with respect to the distance (0 off the fade band)."""
    d_r = np.asarray(d_r, dtype=float)
    d_max = np.asarray(d_max, dtype=float)
    band = (d_r > d_max) & (d_r <= 2.0 * d_max)
    return np.where(band, (1.0 if literal else -1.0) / d_max, 0.0)


def lod_select(d_max: np.ndarray, mu: np.ndarray, camera_center: np.ndarray, literal: bool = False
               ) -> tuple[np.ndarray, np.ndarray]:
    """Indices of primitives that participate and their fade weights."""
    d_r = np.linalg.norm(np.asarray(mu, dtype=float) - np.asarray(camera_center, dtype=float), axis=1)
    w = fade_weights(d_r, d_max, literal)
    keep = d_r <= 2.0 * np.asarray(d_max)
    return np.flatnonzero(keep), w[keep]


@dataclass(frozen=True)
class MapSnapshot:
    """Immutable render-ready view: world positions, RGB, opacity, scales, rotations."""

    mu: np.ndarray
    rgb: np.ndarray
    alpha: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    d_max: np.ndarray
    level: np.ndarray
    v_id: np.ndarray
    uid: np.ndarray

    def __len__(self) -> int:
        return len(self.mu)


# ---------------------------------------------------------------------------
# export


ADGS_MAGIC = b"ADGS"
ADGS_VERSION = 1
FEAT_MAGIC = b"ADGF"
_ADGS_RECORD = np.dtype([("mu", "<f4", 3), ("color", "<f4", 3), ("alpha", "<f4"), ("S", "<f4", 3),
                         ("R", "<f4", 4), ("d_max", "<f4"), ("level", "<u4"), ("v_id", "<u8")])


def encode_map(gmap: GaussianMap) -> bytes:
    S, q, _ = gmap.effective()
    rec = np.zeros(len(gmap), dtype=_ADGS_RECORD)
    rec["mu"], rec["color"], rec["alpha"] = gmap.mu, gmap.sh, gmap.alpha
    rec["S"], rec["R"], rec["d_max"] = S, q, gmap.d_max
    rec["level"], rec["v_id"] = gmap.level, gmap.v_id
    return ADGS_MAGIC + struct.pack("<II", ADGS_VERSION, len(gmap)) + rec.tobytes()


def encode_features(gmap: GaussianMap) -> bytes:
    F = gmap.cfg.feature_dim
    grid = gmap.grid
    keys = np.array(grid.keys if grid else [], dtype="<u8")
    feats = grid.features if grid else np.zeros((0, F))
    head = FEAT_MAGIC + struct.pack("<IIIId", ADGS_VERSION, len(gmap), F, len(keys),
                                    grid.eps if grid else 0.0)
    return (head + gmap.f_l.astype("<f4").tobytes() + keys.tobytes()
            + feats.astype("<f4").tobytes())


def write_map(path, gmap: GaussianMap) -> None:
    path = Path(path)
    path.write_bytes(encode_map(gmap))
    path.with_name(path.name + ".feat").write_bytes(encode_features(gmap))


def read_map(path) -> MapSnapshot:
    data = Path(path).read_bytes()
    if data[:4] != ADGS_MAGIC:
        raise ValueError("not an ADGS map")
    version, n = struct.unpack("<II", data[4:12])
    if version != ADGS_VERSION:
        raise ValueError(f"unsupported ADGS version {version}")
    body = data[12:]
    if len(body) != n * _ADGS_RECORD.itemsize:
        raise ValueError("truncated ADGS map")
    rec = np.frombuffer(body, dtype=_ADGS_RECORD)
    return MapSnapshot(rec["mu"].astype(float), sh_to_rgb(rec["color"].astype(float)),
                       rec["alpha"].astype(float), rec["S"].astype(float),
                       quat_normalize(rec["R"].astype(float)), rec["d_max"].astype(float),
                       rec["level"].astype(np.int64), rec["v_id"].copy(),
                       np.arange(n, dtype=np.int64))
