"""CPU Gaussian splatting: projection, depth-sorted front-to-back compositing and the
analytic backward pass (primitive attributes and the camera's Sim(3) tangent)."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Sim3Transform, quat_to_matrix, skew

DILATION = 0.3
ALPHA_MAX = 0.9999  # opaque enough that an occluder hides what is behind it to 1e-4
T_MIN = 1e-4
MIN_AREA = 0.05
NEAR = 1e-2
PSNR_CAP = 100.0

_GENERATORS = skew(np.eye(3))  # [e_k]x for k = 0, 1, 2


class StaleCacheError(RuntimeError):
    pass


@dataclass
class RenderedImage:
    color: np.ndarray  # H x W x 3
    alpha: np.ndarray  # H x W
    depth: np.ndarray  # H x W, alpha-normalised expected depth (0 where empty)


@dataclass
class SplatGradients:
    color: np.ndarray  # (N, 3) w.r.t. RGB
    opacity: np.ndarray  # (N,) w.r.t. effective opacity
    mu: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 3) left tangent of the world rotation
    pose: np.ndarray  # (7,) left tangent of camera-to-world T_wc


_cache_ids = itertools.count()


@dataclass
class RenderCache:
    n: int
    H: int
    W: int
    background: np.ndarray
    T_wc: Sim3Transform
    K: CameraIntrinsics
    # per visible primitive
    vis: np.ndarray
    P: np.ndarray
    A: np.ndarray
    Sigma_w: np.ndarray
    Sigma_c: np.ndarray
    J: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    mu: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    # per composited (primitive, pixel) pair, sorted by pixel then depth
    pair_prim: np.ndarray
    pair_pix: np.ndarray
    pair_dx: np.ndarray
    pair_G: np.ndarray
    pair_a: np.ndarray
    pair_clamped: np.ndarray
    pair_T: np.ndarray
    seg_start: np.ndarray
    T_final: np.ndarray
    token: int = field(default_factory=lambda: next(_cache_ids))
    used: bool = False


def _project(mu, scales, R, T_wc: Sim3Transform, K: CameraIntrinsics):
    inv = T_wc.inverse()
    A = inv.s * inv.R
    P = mu @ A.T + inv.t
    Sigma_w = np.einsum("nij,nj,nkj->nik", R, scales * scales, R)
    Sigma_c = np.einsum("ij,njk,lk->nil", A, Sigma_w, A)
    x, y, z = P[:, 0], P[:, 1], np.maximum(P[:, 2], NEAR)
    J = np.zeros((len(P), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    cov2 = np.einsum("nij,njk,nlk->nil", J, Sigma_c, J) + DILATION * np.eye(2)
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    return A, P, Sigma_w, Sigma_c, J, cov2, mean2d


def _pairs(mean2d, cov2, H, W):
    """All (primitive, pixel) pairs within each primitive's clipped 3-sigma bounding box."""
    rx = 3.0 * np.sqrt(cov2[:, 0, 0])
    ry = 3.0 * np.sqrt(cov2[:, 1, 1])
    x0 = np.maximum(np.ceil(mean2d[:, 0] - rx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean2d[:, 0] + rx), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - ry), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean2d[:, 1] + ry), H - 1).astype(np.int64)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    cnt = w * h
    prim = np.repeat(np.arange(len(cnt)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    off = np.arange(cnt.sum()) - start
    px = x0[prim] + off % np.maximum(w[prim], 1)
    py = y0[prim] + off // np.maximum(w[prim], 1)
    return prim, px, py


def _scatter(idx, vals, n):
    """Sum of ``vals`` rows grouped by ``idx`` into ``n`` bins."""
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        return np.bincount(idx, vals, minlength=n).astype(float)
    flat = vals.reshape(len(vals), int(np.prod(vals.shape[1:])))
    out = np.stack([np.bincount(idx, flat[:, k], minlength=n).astype(float) for k in range(flat.shape[1])], axis=1)
    return out.reshape((n,) + vals.shape[1:])


def _composite(a, seg_start_of_pair):
    """Segmented front-to-back compositing; returns (T before each pair, kept mask)."""
    log1m = np.log1p(-a)
    cs = np.cumsum(log1m)
    excl = cs - log1m
    base = excl[seg_start_of_pair]
    T_before = np.exp(excl - base)
    # a pixel stops once its transmittance has fallen below T_MIN; the pair that crosses it counts
    kept = T_before >= T_MIN
    return T_before, kept


def splat(mu, rgb, opacity, scales, quats, T_wc: Sim3Transform, K: CameraIntrinsics,
          H: int | None = None, W: int | None = None, background=(0.0, 0.0, 0.0),
          workers: int = 1, return_cache: bool = False):
    """Render primitives (opacity already multiplied by any LoD fade weight).

    ``quats`` may also be (N, 3, 3) rotation matrices. ``T_wc`` is camera-to-world.
    """
    H = K.height if H is None else H
    W = K.width if W is None else W
    bg = np.asarray(background, dtype=float).reshape(3)
    mu = np.asarray(mu, dtype=float).reshape(-1, 3)
    n = len(mu)
    rgb = np.asarray(rgb, dtype=float).reshape(n, 3)
    opacity = np.asarray(opacity, dtype=float).reshape(n)
    scales = np.asarray(scales, dtype=float).reshape(n, 3)
    quats = np.asarray(quats, dtype=float)
    R = quats if quats.ndim == 3 else quat_to_matrix(quats.reshape(n, 4))

    A, P, Sigma_w, Sigma_c, J, cov2, mean2d = _project(mu, scales, R, T_wc, K)
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    area = np.pi * np.sqrt(np.maximum(det, 0.0))
    vis = (P[:, 2] > NEAR) & (area >= MIN_AREA) & (opacity > 0)
    vi = np.flatnonzero(vis)
    conic = np.zeros((n, 2, 2))
    conic[vi] = np.linalg.inv(cov2[vi])

    prim_l, px, py = _pairs(mean2d[vi], cov2[vi], H, W)
    prim = vi[prim_l]
    pix = py * W + px
    dx = np.stack([px - mean2d[prim, 0], py - mean2d[prim, 1]], axis=1)
    power = -0.5 * (conic[prim, 0, 0] * dx[:, 0] ** 2 + 2 * conic[prim, 0, 1] * dx[:, 0] * dx[:, 1]
                    + conic[prim, 1, 1] * dx[:, 1] ** 2)
    G = np.exp(np.minimum(power, 0.0))
    raw = opacity[prim] * G
    clamped = raw > ALPHA_MAX
    a = np.minimum(raw, ALPHA_MAX)

    # sort by pixel, then camera depth, then primitive id
    order = np.lexsort((prim, P[prim, 2], pix))
    prim, pix, dx, G, a, clamped = prim[order], pix[order], dx[order], G[order], a[order], clamped[order]

    new_seg = np.ones(len(pix), dtype=bool)
    new_seg[1:] = pix[1:] != pix[:-1]
    seg_starts = np.flatnonzero(new_seg)
    seg_id = np.cumsum(new_seg) - 1
    start_of = seg_starts[seg_id] if len(pix) else np.zeros(0, dtype=np.int64)

    if workers > 1 and len(pix):
        rows = pix // W
        bounds = np.linspace(0, H, workers + 1).astype(int)
        chunks = [np.flatnonzero((rows >= lo) & (rows < hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]

        def work(idx):
            if len(idx) == 0:
                return idx, np.zeros(0), np.zeros(0, dtype=bool)
            loc_start = np.searchsorted(idx, start_of[idx])
            Tb, kp = _composite(a[idx], loc_start)
            return idx, Tb, kp

        T_before = np.empty(len(pix))
        kept = np.empty(len(pix), dtype=bool)
        with ThreadPoolExecutor(workers) as ex:
            for idx, Tb, kp in ex.map(work, chunks):
                T_before[idx] = Tb
                kept[idx] = kp
    else:
        T_before, kept = _composite(a, start_of)

    # drop pairs after termination
    prim, pix, dx, G, a, clamped, T_before = (prim[kept], pix[kept], dx[kept], G[kept], a[kept],
                                              clamped[kept], T_before[kept])
    new_seg = np.ones(len(pix), dtype=bool)
    new_seg[1:] = pix[1:] != pix[:-1]
    seg_start = np.flatnonzero(new_seg)

    wts = a * T_before
    color = _scatter(pix, wts[:, None] * rgb[prim], H * W)
    acc = _scatter(pix, wts, H * W)
    dep = _scatter(pix, wts * P[prim, 2], H * W)
    T_final = 1.0 - acc
    # T_final from products is more accurate than 1 - sum
    seg_end = np.append(seg_start[1:], len(pix)) - 1
    if len(pix):
        T_final[pix[seg_end]] = T_before[seg_end] * (1.0 - a[seg_end])
    T_final[np.setdiff1d(np.arange(H * W), pix)] = 1.0
    color += T_final[:, None] * bg
    alpha_img = 1.0 - T_final
    depth = np.where(alpha_img > 0, dep / np.maximum(alpha_img, 1e-300), 0.0)
    out = RenderedImage(color.reshape(H, W, 3), alpha_img.reshape(H, W), depth.reshape(H, W))
    if not return_cache:
        return out
    cache = RenderCache(n, H, W, bg, T_wc, K, vis, P, A, Sigma_w, Sigma_c, J, conic, mean2d, R,
                        scales, mu, rgb, opacity, prim, pix, dx, G, a, clamped, T_before, seg_start,
                        T_final)
    return out, cache


def splat_backward(cache: RenderCache, dL_dimage: np.ndarray) -> SplatGradients:
    """Analytic gradients for one forward call; a cache can be consumed only once."""
    if cache.used:
        raise StaleCacheError("render cache already consumed by a backward pass")
    cache.used = True
    n, H, W = cache.n, cache.H, cache.W
    g_img = np.asarray(dL_dimage, dtype=float).reshape(H * W, 3)
    prim, pix, a, T = cache.pair_prim, cache.pair_pix, cache.pair_a, cache.pair_T
    rgb = cache.rgb

    g_rgb = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_mu = np.zeros((n, 3))
    g_S = np.zeros((n, 3))
    g_rot = np.zeros((n, 3))
    g_pose = np.zeros(7)
    if len(prim) == 0 or not np.any(g_img):
        return SplatGradients(g_rgb, g_op, g_mu, g_S, g_rot, g_pose)

    gp = g_img[pix]
    wts = a * T
    g_rgb = _scatter(prim, wts[:, None] * gp, n)

    # suffix: sum of later contributions in the same pixel plus background through T_final
    contrib = np.einsum("ij,ij->i", gp, rgb[prim]) * wts
    rev = np.cumsum(contrib[::-1])[::-1]
    seg_end = np.append(cache.seg_start[1:], len(prim))
    seg_of = np.repeat(np.arange(len(cache.seg_start)), seg_end - cache.seg_start)
    after_end = np.append(rev, 0.0)[seg_end[seg_of]]
    later = rev - contrib - after_end
    bg_term = cache.T_final[pix] * (g_img[pix] @ cache.background)
    dC_da = np.einsum("ij,ij->i", gp, rgb[prim]) * T - (later + bg_term) / (1.0 - a)
    dC_da = np.where(cache.pair_clamped, 0.0, dC_da)

    G = cache.pair_G
    op = cache.opacity[prim]
    g_op = _scatter(prim, dC_da * G, n)
    g_power = dC_da * op * G
    dx = cache.pair_dx
    con = cache.conic[prim]
    # power = -0.5 (a dx^2 + 2 b dx dy + c dy^2)
    g_mean = np.stack([g_power * (con[:, 0, 0] * dx[:, 0] + con[:, 0, 1] * dx[:, 1]),
                       g_power * (con[:, 0, 1] * dx[:, 0] + con[:, 1, 1] * dx[:, 1])], axis=1)
    g_con = np.zeros((len(prim), 2, 2))
    g_con[:, 0, 0] = -0.5 * g_power * dx[:, 0] ** 2
    g_con[:, 1, 1] = -0.5 * g_power * dx[:, 1] ** 2
    g_con[:, 0, 1] = g_con[:, 1, 0] = -0.5 * g_power * dx[:, 0] * dx[:, 1]

    gm = _scatter(prim, g_mean, n)
    gc = _scatter(prim, g_con, n)

    vi = np.flatnonzero(cache.vis)
    K = cache.K
    P = cache.P[vi]
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    con = cache.conic[vi]
    g_cov2 = -np.einsum("nij,njk,nkl->nil", con, gc[vi], con)
    J = cache.J[vi]
    Sc = cache.Sigma_c[vi]
    g_Sc = np.einsum("nji,njk,nkl->nil", J, g_cov2, J)
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2, J, Sc)

    g_P = np.zeros((len(vi), 3))
    gmx, gmy = gm[vi, 0], gm[vi, 1]
    g_P[:, 0] += gmx * K.fx / z
    g_P[:, 1] += gmy * K.fy / z
    g_P[:, 2] += -gmx * K.fx * x / z ** 2 - gmy * K.fy * y / z ** 2
    # projection Jacobian entries
    g_P[:, 2] += g_J[:, 0, 0] * (-K.fx / z ** 2) + g_J[:, 1, 1] * (-K.fy / z ** 2)
    g_P[:, 0] += g_J[:, 0, 2] * (-K.fx / z ** 2)
    g_P[:, 2] += g_J[:, 0, 2] * (2 * K.fx * x / z ** 3)
    g_P[:, 1] += g_J[:, 1, 2] * (-K.fy / z ** 2)
    g_P[:, 2] += g_J[:, 1, 2] * (2 * K.fy * y / z ** 3)

    A = cache.A
    g_mu_v = g_P @ A
    g_Sw = np.einsum("ji,njk,kl->nil", A, g_Sc, A)
    Rv = cache.R[vi]
    Sv = cache.scales[vi]
    Sw = cache.Sigma_w[vi]
    RtGR = np.einsum("nji,njk,nkl->nil", Rv, g_Sw, Rv)
    g_S_v = 2.0 * Sv * np.einsum("nii->ni", RtGR)
    # d Sigma = [th]x Sigma - Sigma [th]x for a left rotation increment
    g_rot_v = np.einsum("nij,kil,nlj->nk", g_Sw, _GENERATORS, Sw) \
        - np.einsum("nij,nil,klj->nk", g_Sw, Sw, _GENERATORS)

    g_mu[vi] = g_mu_v
    g_S[vi] = g_S_v
    g_rot[vi] = g_rot_v

    # camera T_wc <- exp(d) T_wc is equivalent to moving every primitive by exp(-d)
    muv = cache.mu[vi]
    g_pose[:3] = -g_mu_v.sum(axis=0)
    g_pose[3:6] = -np.cross(muv, g_mu_v).sum(axis=0) - g_rot_v.sum(axis=0)
    g_pose[6] = -np.einsum("ni,ni->", muv, g_mu_v) + 2.0 * -np.einsum("nij,nij->", g_Sw, Sw)
    return SplatGradients(g_rgb, g_op, g_mu, g_S, g_rot, g_pose)


def render_snapshot(snap, T_wc: Sim3Transform, K: CameraIntrinsics, background=(0.0, 0.0, 0.0),
                    literal_fade: bool = False, workers: int = 1) -> RenderedImage:
    """LoD-select and render an immutable map snapshot."""
    from .gaussians import lod_select

    idx, w = lod_select(snap.d_max, snap.mu, T_wc.t, literal_fade)
    return splat(snap.mu[idx], snap.rgb[idx], snap.alpha[idx] * w, snap.scales[idx],
                 snap.quats[idx], T_wc, K, background=background, workers=workers)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
