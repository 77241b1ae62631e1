"""Acceptance criteria, each at its stated tolerance and wall-clock budget.

Finite-difference oracles perturb through ``scipy.linalg.expm`` of the 4x4 similarity
generator and projections are re-derived here, so no check reuses the code under test
on both sides.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from artcore.backend import (confidence_from_error, keyframe_residuals, pointmap_confidence,
                             pose_pair_jacobians)
from artcore.benchmarks import TOY_SCENE, loop_ablation, photometric_progress
from artcore.config import load_config
from artcore.frontend import FrameClass, FrontendConfig, estimate_relative_pose, point_covariances
from artcore.gaussians import (LEVEL_SCALE, TAU_A, GaussianMap, MapConfig, RefinerMLP, VoxelGrid,
                               base_scale, fade_weights, init_primitive, insertion_probability,
                               level_cutoff, level_scale_weight, lod_select)
from artcore.geometry import (CameraIntrinsics, Sim3Transform, jacobian_wrt_focal,
                              jacobian_wrt_point, pose_error, propagate_covariance)
from artcore.mapping import MapOptimizer, OptimConfig, SupervisionError, sample_supervision
from artcore.pipeline import Pipeline
from artcore.providers import Pointmap, SyntheticProvider, SyntheticSceneConfig
from artcore.splatting import splat, splat_backward

# ---------------------------------------------------------------------------
# independent oracles


def hat(xi):
    """4x4 generator of the similarity algebra for (v, omega, sigma)."""
    v, w, s = xi[:3], xi[3:6], xi[6]
    M = np.zeros((4, 4))
    M[:3, :3] = np.array([[s, -w[2], w[1]], [w[2], s, -w[0]], [-w[1], w[0], s]])
    M[:3, 3] = v
    return M


def mat(T: Sim3Transform) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = T.s * Rotation.from_quat(np.roll(T.q, -1)).as_matrix()
    M[:3, 3] = T.t
    return M


def from_mat(M) -> Sim3Transform:
    s = np.cbrt(np.linalg.det(M[:3, :3]))
    q = np.roll(Rotation.from_matrix(M[:3, :3] / s).as_quat(), 1)
    return Sim3Transform(s, q, M[:3, 3])


def left(T: Sim3Transform, xi) -> Sim3Transform:
    return from_mat(expm(hat(xi)) @ mat(T))


def project(P, fx, fy, cx, cy):
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    return np.stack([fx * X / Z + cx, fy * Y / Z + cy, np.log(Z)], axis=-1)


def rand_T(rng, rot=0.5, trans=0.5, scale=0.3):
    M = expm(hat(np.concatenate([rng.normal(0, trans, 3), rng.normal(0, rot, 3),
                                 [rng.normal(0, scale)]])))
    return from_mat(M)


def rand_K(rng):
    W, H = int(rng.integers(32, 640)), int(rng.integers(32, 480))
    f = rng.uniform(30, 600)
    return CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(0.3, 0.7) * W,
                            rng.uniform(0.3, 0.7) * H, W, H)


def central(f, x, h):
    x = np.asarray(x, dtype=float)
    out = []
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        out.append((np.asarray(f(x + e.reshape(x.shape))) - np.asarray(f(x - e.reshape(x.shape))))
                   / (2 * h))
    return np.stack(out, axis=-1)


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


N_CONFIGS = 1000


# ---------------------------------------------------------------------------
# 1


def _jacobian_point_errors(rng):
    errs = []
    for _ in range(N_CONFIGS):
        K = rand_K(rng)
        P = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 8)])
        J = jacobian_wrt_point(P, K)
        num = central(lambda x: project(x, K.fx, K.fy, K.cx, K.cy), P, 1e-6 * np.abs(P).max())
        errs.append(rel(J, num))
    return errs


def _jacobian_focal_errors(rng):
    """Draws whose reprojected point lands behind the keyframe are redrawn."""
    errs = []
    while len(errs) < N_CONFIGS:
        K = rand_K(rng)
        f = K.fx
        K = dataclasses.replace(K, fy=f)
        pix = np.array([rng.uniform(0, K.width), rng.uniform(0, K.height)])
        Z = rng.uniform(1, 6)
        T = rand_T(rng, rot=0.1, trans=0.1, scale=0.1)
        M = mat(T)

        def reproject(fv):
            fv = float(np.ravel(fv)[0])
            Pc = np.array([(pix[0] - K.cx) / fv * Z, (pix[1] - K.cy) / fv * Z, Z])
            return project(M[:3, :3] @ Pc + M[:3, 3], fv, fv, K.cx, K.cy)

        if (M[:3, :3] @ np.array([(pix[0] - K.cx) / f * Z, (pix[1] - K.cy) / f * Z, Z])
                + M[:3, 3])[2] < 0.2:
            continue
        J = jacobian_wrt_focal(pix, Z, T, K)
        num = central(reproject, np.array([f]), 1e-6 * f)[:, 0]
        errs.append(rel(J, num))
    return errs


def _pose_pair_errors(rng):
    errs = []
    for _ in range(N_CONFIGS):
        K = rand_K(rng)
        Ti, Tj = rand_T(rng), rand_T(rng)
        Pj = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 6)])
        Pw = (mat(Tj) @ np.append(Pj, 1))[:3]
        Pi = (np.linalg.inv(mat(Ti)) @ np.append(Pw, 1))[:3]

        def residual(Mi, Mj):
            P = (np.linalg.inv(Mj) @ Mi @ np.append(Pi, 1))[:3]
            return project(P, K.fx, K.fy, K.cx, K.cy)

        Mi, Mj = mat(Ti), mat(Tj)
        Ji, Jj = pose_pair_jacobians(Pi, Ti, Tj, K)
        num_i = central(lambda d: residual(expm(hat(d)) @ Mi, Mj), np.zeros(7), 1e-6)
        num_j = central(lambda d: residual(Mi, expm(hat(d)) @ Mj), np.zeros(7), 1e-6)
        errs += [rel(Ji, num_i), rel(Jj, num_j)]
    return errs


def _random_mlp(rng, kind):
    d_in, hidden = 8, 6
    m = RefinerMLP(kind, d_in, hidden, rng=rng)
    m.params["b1"] = rng.normal(0, 0.3, hidden)
    m.params["W2"] = rng.normal(0, 0.5, m.params["W2"].shape)
    if kind == "rotation":
        m.params["b2"] = np.array([1.0, 0, 0, 0]) + rng.normal(0, 0.3, 4)
    else:
        m.params["b2"] = rng.normal(0, 0.3, 3)
    return m


def _refiner_errors(rng):
    """Directional derivatives along random directions for every parameter and the input."""
    errs = []
    for i in range(N_CONFIGS):
        kind = "scale" if i % 2 == 0 else "rotation"
        m = _random_mlp(rng, kind)
        x = rng.normal(0, 1, (3, 8))
        if kind == "scale":
            C = rng.normal(0, 1, (3, 3))

            def loss(params, xv):
                saved = m.params
                m.params = params
                y = m(xv)
                m.params = saved
                return float(np.sum(C * y))

            y, cache = m.forward(x)
            grads, gx = m.backward(cache, C)
        else:
            Wm = rng.normal(0, 1, (3, 3, 3))

            def rot_loss(q):
                R = Rotation.from_quat(np.roll(q, -1, axis=-1)).as_matrix()
                return float(np.sum(Wm * R))

            def loss(params, xv):
                saved = m.params
                m.params = params
                y = m(xv)
                m.params = saved
                return rot_loss(y)

            y, cache = m.forward(x)
            R0 = Rotation.from_quat(np.roll(y, -1, axis=-1)).as_matrix()
            # left-tangent gradient of the rotation loss, by differences on SO(3)
            g_theta = np.zeros((3, 3))
            for n in range(3):
                for k in range(3):
                    e = np.zeros(3)
                    e[k] = 1e-6
                    Rp, Rm = R0.copy(), R0.copy()
                    Rp[n] = Rotation.from_rotvec(e).as_matrix() @ R0[n]
                    Rm[n] = Rotation.from_rotvec(-e).as_matrix() @ R0[n]
                    g_theta[n, k] = (np.sum(Wm * Rp) - np.sum(Wm * Rm)) / 2e-6
            grads, gx = m.rotation_backward(cache, g_theta)
            if not np.allclose(np.linalg.norm(y, axis=1), 1.0):
                raise AssertionError("rotation refiner output is not unit norm")
        an, num = [], []
        for name in ("W1", "b1", "W2", "b2", "x"):
            for _ in range(2):
                base = x if name == "x" else m.params[name]
                d = rng.normal(0, 1, base.shape)
                h = 1e-6

                def at(sign):
                    if name == "x":
                        return loss(m.params, x + sign * h * d)
                    p = dict(m.params)
                    p[name] = m.params[name] + sign * h * d
                    return loss(p, x)

                num.append((at(1) - at(-1)) / (2 * h))
                an.append(float(np.sum((gx if name == "x" else grads[name]) * d)))
        errs.append(rel(an, num))
    return errs


def _splat_errors(rng):
    """Directional derivatives of a random linear functional of the rendered image, per
    parameter class. Opacities stay below the clamp and primitive counts low enough that
    transmittance never reaches the termination threshold."""
    H = W = 10
    K = CameraIntrinsics(10.0, 10.0, 4.5, 4.5, W, H)
    errs = []
    for _ in range(N_CONFIGS):
        n = int(rng.integers(1, 5))
        z = rng.uniform(2, 4, n)
        mu = np.column_stack([rng.uniform(-0.3, 0.3, n) * z, rng.uniform(-0.3, 0.3, n) * z, z])
        rgb = rng.uniform(0, 1, (n, 3))
        op = rng.uniform(0.05, 0.8, n)
        S = rng.uniform(0.1, 0.5, (n, 3))
        R = Rotation.random(n, random_state=rng).as_matrix()
        T = rand_T(rng, rot=0.05, trans=0.05, scale=0.05)
        bg = rng.uniform(0, 1, 3)
        Wimg = rng.normal(0, 1, (H, W, 3))

        def L(mu=mu, rgb=rgb, op=op, S=S, R=R, T=T):
            return float(np.sum(Wimg * splat(mu, rgb, op, S, R, T, K, background=bg).color))

        img, cache = splat(mu, rgb, op, S, R, T, K, background=bg, return_cache=True)
        g = splat_backward(cache, Wimg)

        def rotate(d, eps):
            return np.stack([Rotation.from_rotvec(eps * d[i]).as_matrix() @ R[i] for i in range(n)])

        h = 1e-6
        classes = {
            "color": (lambda d, e: L(rgb=rgb + e * d), rgb.shape, g.color),
            "opacity": (lambda d, e: L(op=op + e * d), op.shape, g.opacity),
            "mu": (lambda d, e: L(mu=mu + e * d), mu.shape, g.mu),
            "scales": (lambda d, e: L(S=S + e * d), S.shape, g.scales),
            "rotation": (lambda d, e: L(R=rotate(d, e)), (n, 3), g.rotation),
            "pose": (lambda d, e: L(T=left(T, e * d)), (7,), g.pose),
        }
        for name, (fn, shape, grad) in classes.items():
            an, num = [], []
            for _ in range(2):
                d = rng.normal(0, 1, shape)
                num.append((fn(d, h) - fn(d, -h)) / (2 * h))
                an.append(float(np.sum(grad * d)))
            errs.append((name, rel(an, num)))
    return errs


@pytest.mark.criterion(1, "Jacobian suite vs central differences", 60)
def test_criterion_01_jacobians(within_budget):
    rng = np.random.default_rng(20240601)
    point = _jacobian_point_errors(rng)
    focal = _jacobian_focal_errors(rng)
    pair = _pose_pair_errors(rng)
    refiner = _refiner_errors(rng)
    spl = _splat_errors(rng)
    print(f"\nworst relative error: point {max(point):.2e}, focal {max(focal):.2e}, "
          f"pose pair {max(pair):.2e}, refiner {max(refiner):.2e}, "
          f"splat {max(e for _, e in spl):.2e}")
    assert len(point) >= N_CONFIGS and len(pair) >= 2 * N_CONFIGS
    assert len(focal) >= N_CONFIGS and len(refiner) >= N_CONFIGS and len(spl) >= 6 * N_CONFIGS
    assert max(point) < 1e-5
    assert max(focal) < 1e-5
    assert max(pair) < 1e-5
    assert max(refiner) < 1e-5
    bad = [(n, e) for n, e in spl if not e < 1e-3]
    assert not bad, bad[:5]
    within_budget()


# ---------------------------------------------------------------------------
# 2


@pytest.mark.criterion(2, "covariance transport vs Monte Carlo", 30)
def test_criterion_02_covariance_transport(within_budget):
    rng = np.random.default_rng(7)
    for case in range(20):
        K = CameraIntrinsics(*rng.uniform(100, 500, 1).repeat(2), 160.0, 120.0, 320, 240)
        Pc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5)])
        A = rng.normal(0, 1, (3, 3))
        Sigma = A @ A.T + 0.1 * np.eye(3)
        Sigma *= (0.004 * Pc[2]) ** 2 / np.max(np.linalg.eigvalsh(Sigma))
        R = Rotation.random(random_state=rng).as_matrix()
        Pk = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5)])
        t = Pk - R @ Pc
        X, Y, Z = Pk
        J = np.array([[K.fx / Z, 0, -K.fx * X / Z**2], [0, K.fy / Z, -K.fy * Y / Z**2],
                      [0, 0, 1 / Z]])
        pred = propagate_covariance(Sigma, R, J)
        L = np.linalg.cholesky(Sigma)
        samples = []
        for _ in range(10):
            draws = Pc + rng.standard_normal((100_000, 3)) @ L.T
            samples.append(project(draws @ R.T + t, K.fx, K.fy, K.cx, K.cy))
        m = np.concatenate(samples)
        emp = np.cov(m.T)
        err = np.linalg.norm(emp - pred) / np.linalg.norm(pred)
        assert err < 0.05, (case, err)
    within_budget()


# ---------------------------------------------------------------------------
# 3


@pytest.mark.criterion(3, "tracking oracle, noiseless and 20% outliers", 60)
def test_criterion_03_tracking(within_budget):
    worst = {0.0: 0.0, 0.2: 0.0}
    cfg = FrontendConfig()
    for seed in range(50):
        for frac in worst:
            prov = SyntheticProvider(SyntheticSceneConfig(n_frames=2, period=60, seed=seed,
                                                          outlier_fraction=frac))
            pm, _, corrs = prov.match(prov.frame(1), prov.frame(0))
            cov = point_covariances(corrs, pm.valid_pixels()[1], prov.K, cfg)
            res = estimate_relative_pose(corrs, cov, prov.K, Sim3Transform.identity(), cfg=cfg)
            worst[frac] = max(worst[frac], pose_error(res.T_kc, prov.relative_pose(0, 1)))
    print(f"\nworst pose error: noiseless {worst[0.0]:.2e}, 20% outliers {worst[0.2]:.2e}")
    assert worst[0.0] < 1e-8
    assert worst[0.2] < 1e-4
    within_budget()


# ---------------------------------------------------------------------------
# 4


@pytest.mark.criterion(4, "loop-closure ablation, 10 seeds", 300)
def test_criterion_04_loop_closure(within_budget):
    pairs = loop_ablation(range(10))
    ratios = [off / on for off, on in pairs]
    print("\nATE off/on:", ", ".join(f"{off:.4f}/{on:.4f}" for off, on in pairs))
    print(f"median reduction {np.median(ratios):.2f}x")
    assert all(on < off for off, on in pairs)
    assert np.median(ratios) >= 5.0
    within_budget()


# ---------------------------------------------------------------------------
# 5

LIGHT_OPTIM = {"optim.K": "2", "optim.global_budget": "20"}


@pytest.mark.criterion(5, "end-to-end noiseless run", 120)
def test_criterion_05_end_to_end(within_budget, tmp_path):
    cfg = load_config(None, {}, {"synthetic.n_frames": "40", "deterministic": "true",
                                 "loop_closure": "false", "out": str(tmp_path), **LIGHT_OPTIM})
    cfg.validate()
    pipe = Pipeline(cfg)
    report = pipe.run()
    K = next(iter(pipe.intrinsics.values()))
    res = keyframe_residuals(pipe.backend.graph, K)
    print(f"\nATE {report.ate_rmse:.3e}, keyframes {len(res)}, worst residual "
          f"{max(res.values()):.3e} px")
    assert report.complete and report.exit_code == 0
    assert len(report.trajectory) == 40
    assert report.ate_rmse < 1e-6
    assert len(res) >= 2 and max(res.values()) < 1e-8
    within_budget()


# ---------------------------------------------------------------------------
# 6


@pytest.mark.criterion(6, "confidence formula", 10)
def test_criterion_06_confidence(within_budget):
    assert confidence_from_error(3.0) == 1.0
    assert confidence_from_error(5.0) == 1.0 / 3.0
    e = np.array([0.0, 2.9, 3.0, 3.5, 4.0, 5.0, 13.0])
    expect = np.where(e <= 3.0, 1.0, 1.0 / (e - 3.0 + 1.0))
    assert np.array_equal(confidence_from_error(e), expect)

    prov = SyntheticProvider(SyntheticSceneConfig(n_frames=12, period=60, seed=3))
    gt = prov.ground_truth()
    K = prov.K
    c = 8
    pm = prov.pointmap(c)
    nbrs = [(prov.pointmap(j), gt[j].inverse() @ gt[c]) for j in (5, 6, 10)]
    C = pointmap_confidence(pm, nbrs, K)
    # pixels seen by at least one neighbour, found independently of the implementation
    seen = np.zeros(pm.shape, dtype=bool)
    uv, X = pm.valid_pixels()
    for pm_j, T_jc in nbrs:
        M = mat(T_jc)
        Y = X @ M[:3, :3].T + M[:3, 3]
        front = Y[:, 2] > 0
        p = np.full((len(X), 2), -10.0)
        p[front] = project(Y[front], K.fx, K.fy, K.cx, K.cy)[:, :2]
        ij = np.rint(p).astype(int)
        ok = front & (ij[:, 0] >= 0) & (ij[:, 0] < K.width) & (ij[:, 1] >= 0) & (ij[:, 1] < K.height)
        ok[ok] &= pm_j.valid[ij[ok, 1], ij[ok, 0]]
        seen[uv[ok, 1].astype(int), uv[ok, 0].astype(int)] = True
    assert seen.sum() > 0.5 * pm.valid.sum()
    assert np.all(C[seen] == 1.0)
    within_budget()


# ---------------------------------------------------------------------------
# 7


@pytest.mark.criterion(7, "LoD branches and level initialization", 10)
def test_criterion_07_lod(within_budget):
    from hypothesis import given, settings
    from hypothesis import strategies as st

    expected = {0.5: 1.0, 1.0: 1.0, 1.5: 0.5, 2.0: 0.0, 2.5: None}
    d_max = np.array([0.5, 1.0, 4.0, 64.0])  # dyadic, so k * d_max is exact
    for k, w_exp in expected.items():
        d_r = k * d_max
        mu = np.column_stack([d_r, np.zeros(4), np.zeros(4)])
        idx, w = lod_select(d_max, mu, np.zeros(3))
        if w_exp is None:
            assert len(idx) == 0
        else:
            assert np.array_equal(idx, np.arange(4))
            assert np.array_equal(w, np.full(4, w_exp))
        assert np.array_equal(fade_weights(d_r, d_max),
                              np.full(4, 0.0 if w_exp is None else w_exp))

    @settings(max_examples=300, deadline=None)
    @given(level=st.integers(0, 3), d=st.floats(0.1, 50.0), resp=st.floats(1e-5, 2.0),
           f=st.floats(10.0, 1000.0))
    def level_init(level, d, resp, f):
        pm = Pointmap(np.array([[[0.0, 0.0, d]]]), np.array([[True]]), np.array([[1.0]]))
        grid = VoxelGrid(0.5)
        prim = init_primitive((0, 0), pm, np.full((1, 1, 3), 0.5), 0.7, level, grid,
                              (RefinerMLP("scale"), RefinerMLP("rotation")),
                              Sim3Transform.identity(), f, resp)
        assert prim.d_max == d * 2.0 ** (2 * level)
        assert prim.d_max == level_cutoff(d, level)
        assert level_scale_weight(level) == LEVEL_SCALE ** (2 * level)
        assert prim.S_b == base_scale(d, resp, f) * 1.4 ** (2 * level)
        assert np.array_equal(prim.S, np.full(3, prim.S_b))

    level_init()
    within_budget()


# ---------------------------------------------------------------------------
# 8


def _log_oracle(img):
    """LoG magnitude by explicit padding and a sliding-window sum."""
    from numpy.lib.stride_tricks import sliding_window_view

    sigma = 1.5
    r = int(np.ceil(3 * sigma))
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    g = np.exp(-(x * x + y * y) / (2 * sigma**2)) / (2 * np.pi * sigma**2)
    k = g * (x * x + y * y - 2 * sigma**2) / sigma**4
    k -= k.mean()
    out = []
    for c in range(3):
        p = np.pad(img[..., c], r, mode="symmetric")
        win = sliding_window_view(p, k.shape)
        out.append(np.einsum("ijkl,kl->ij", win, k[::-1, ::-1]))
    return np.sqrt(np.sum(np.square(out), axis=0))


@pytest.mark.criterion(8, "insertion correctness", 60)
def test_criterion_08_insertion(within_budget, monkeypatch):
    rng = np.random.default_rng(5)
    for _ in range(50):
        img = rng.uniform(0, 1, (int(rng.integers(8, 40)), int(rng.integers(8, 40)), 3))
        assert not np.any(insertion_probability(img, img).prob)

    calls = []
    orig = GaussianMap.insert_frame

    def spy(self, frame_id, image, pointmap, rendered, confidence, T_wc, focal):
        before = len(self.insertions)
        n = orig(self, frame_id, image, pointmap, rendered, confidence, T_wc, focal)
        calls.append((frame_id, image, pointmap, rendered, self.insertions[before:], n))
        return n

    monkeypatch.setattr(GaussianMap, "insert_frame", spy)
    prov = SyntheticProvider(dataclasses.replace(TOY_SCENE, n_frames=16))
    gt, K = prov.ground_truth(), prov.K
    opt = MapOptimizer(GaussianMap(MapConfig()), OptimConfig(K=4, global_budget=0))
    for i in range(16):
        cls = FrameClass.KEYFRAME if i == 0 else (FrameClass.MAPPER if i % 4 == 0 else FrameClass.COMMON)
        opt.streaming_step(i, cls, prov.frame(i).image, gt[i], K, prov.pointmap(i))
    assert len(calls) == 4
    total = 0
    for fid, image, pm, rendered, records, n in calls:
        assert len(records) == n
        assert all(r.p_a > TAU_A for r in records)
        oracle = np.maximum(np.minimum(_log_oracle(image), 1) - np.minimum(_log_oracle(rendered), 1), 0)
        lvl0 = {(r.u, r.v) for r in records if r.level == 0}
        expect = {(int(u), int(v)) for v, u in zip(*np.nonzero((oracle > TAU_A) & pm.valid))}
        # exact equality of the level-0 set up to pixels on the threshold knife edge
        edge = {(int(u), int(v)) for v, u in zip(*np.nonzero(np.abs(oracle - TAU_A) < 1e-9))}
        assert lvl0 - edge == expect - edge
        total += n
    assert total == len(opt.map)
    within_budget()


# ---------------------------------------------------------------------------
# 9


@pytest.mark.criterion(9, "photometric progress on the 64x64 toy scene", 300)
def test_criterion_09_photometric_progress(within_budget):
    res = photometric_progress()
    print(f"\nheld-out PSNR: init {res.init_psnr:.2f}, streaming {res.streaming_psnr:.2f}, "
          f"global {res.global_psnr:.2f} dB")
    assert not (set(res.eval_frames) & res.supervised)
    assert res.global_psnr - res.init_psnr >= 5.0
    assert res.global_psnr - res.streaming_psnr >= 1.0
    within_budget()


# ---------------------------------------------------------------------------
# 10


@pytest.mark.criterion(10, "deterministic runs are byte-identical", 180)
def test_criterion_10_determinism(within_budget, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        cfg = load_config(None, {}, {"synthetic.n_frames": "16", "deterministic": "true",
                                     "out": str(out), "seed": "3", **LIGHT_OPTIM})
        Pipeline(cfg.validate()).run()
        outs.append(out)
    names = ["metrics.json", "map.adgs", "map.adgs.feat", "map.adgs.manifest", "trajectory.txt"]
    for name in names:
        a, b = (Path(o, name).read_bytes() for o in outs)
        assert len(a) > 0
        assert a == b, name
    within_budget()


# ---------------------------------------------------------------------------
# 11


@pytest.mark.criterion(11, "schedule contract and eval-frame isolation", 60)
def test_criterion_11_schedule(within_budget):
    rng = np.random.default_rng(0)
    history = list(range(10))
    picks = [sample_supervision(rng, 99, history, 0.2) for _ in range(10_000)]
    frac = np.mean(np.array(picks) == 99)
    assert abs(frac - 0.2) <= 0.02, frac

    scene = SyntheticSceneConfig(width=16, height=16, n_frames=10, seed=1, n_landmarks=60,
                                 trajectory="line-with-return", radius=1.0)
    prov = SyntheticProvider(scene)
    gt, K = prov.ground_truth(), prov.K
    cfg = OptimConfig(K=30, global_budget=40)
    opt = MapOptimizer(GaussianMap(MapConfig()), cfg)
    held = [3, 7]
    opt.mark_eval(held)
    counts = {}
    for i in range(10):
        if i in held:
            with pytest.raises(SupervisionError):
                opt.add_frame(i, prov.frame(i).image, gt[i], K)
            continue
        cls = [FrameClass.KEYFRAME, FrameClass.MAPPER, FrameClass.COMMON][0 if i == 0 else 1 + i % 2]
        n_before = len(opt.supervision_log)
        rep = opt.streaming_step(i, cls, prov.frame(i).image, gt[i], K, prov.pointmap(i))
        counts[cls] = counts.get(cls, set()) | {rep.iterations}
        assert len(opt.supervision_log) - n_before == rep.iterations
    assert counts[FrameClass.KEYFRAME] == {30}
    assert counts[FrameClass.MAPPER] == {30}
    assert counts[FrameClass.COMMON] == {15}
    opt.global_phase()
    assert not set(opt.supervision_log) & set(held)
    assert not set(opt.grad_norm_by_frame) & set(held)
    assert set(opt.ledger.visits) == set(range(10)) - set(held)
    within_budget()
