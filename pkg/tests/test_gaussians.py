import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artcore.gaussians import (OPACITY_INIT, TAU_A, GaussianMap, GaussianPrimitive, MapConfig,
                               RefinerMLP, VoxelGrid, base_scale, build_lod_pyramid,
                               downsample_pointmap, fade_weights, init_primitive,
                               insertion_probability, lod_select, log_kernel, log_magnitude,
                               pack_voxel, read_map, refine_rot, refine_scale, rgb_to_sh,
                               sh_to_rgb, unpack_voxel, write_map)
from artcore.geometry import Sim3Transform, sim3_exp
from artcore.providers.base import Pointmap
from artcore.providers.synthetic import SyntheticProvider, SyntheticSceneConfig


@pytest.fixture(scope="module")
def scene():
    prov = SyntheticProvider(SyntheticSceneConfig(n_frames=1, width=64, height=64, seed=2))
    return prov, prov.frame(0).image, prov.pointmap(0), prov.ground_truth()[0]


def brute_log(img, k):
    """Direct per-pixel correlation with mirrored borders (the kernel is symmetric)."""
    r = k.shape[0] // 2
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="symmetric")
    H, W = img.shape[:2]
    out = np.zeros(img.shape)
    for y in range(H):
        for x in range(W):
            out[y, x] = np.einsum("ij,ijc->c", k, pad[y:y + 2 * r + 1, x:x + 2 * r + 1])
    return np.sqrt((out ** 2).sum(-1))


# ---------------------------------------------------------------- insertion probability


def test_log_kernel_shape_and_zero_sum():
    k = log_kernel(1.5)
    assert k.shape == (11, 11) and abs(k.sum()) < 1e-15
    assert np.allclose(k, k.T) and np.allclose(k, k[::-1])
    assert k[5, 5] == k.min() < 0


def test_log_matches_brute_force():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (14, 17, 3))
    assert np.allclose(log_magnitude(img), brute_log(img, log_kernel()), atol=1e-12)


def test_identical_images_give_zero_probability(scene):
    _, img, _, _ = scene
    m = insertion_probability(img, img)
    assert np.all(m.prob == 0) and not m.selected.any()


def test_step_edge_against_flat_render():
    img = np.zeros((20, 20, 3))
    img[:, 10:] = 1.0
    flat = np.full_like(img, 0.5)
    m = insertion_probability(img, flat)
    mag = np.minimum(brute_log(img, log_kernel()), 1.0)
    assert np.allclose(m.prob, mag, atol=1e-12)
    assert np.all(m.prob[:, 8:12] > 0) and np.all(m.prob[:, :3] == 0)
    assert m.selected[:, 9:11].all()


def test_clamp_saturation_cancels():
    img = np.zeros((20, 20, 3))
    img[:, 10:] = 1.0
    m = insertion_probability(100.0 * img, 30.0 * img)
    # both responses clip to 1 on the edge; elsewhere both are exactly zero
    assert np.all(m.prob[:, 9:11] == 0)
    assert log_magnitude(30.0 * img)[:, 9:11].min() > 1


def test_size_mismatch_raises():
    with pytest.raises(ValueError):
        insertion_probability(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ---------------------------------------------------------------- scales and levels


def test_base_scale_examples():
    assert base_scale(2.0, 1.0, 100.0) == pytest.approx(0.01)
    assert base_scale(1.0, 0.25, 1.0) == pytest.approx(1.0)
    assert base_scale(1.0, 0.0, 1.0) == pytest.approx(50.0)
    assert base_scale(1.0, 7.0, 1.0) == base_scale(1.0, 1.0, 1.0)


def test_init_primitive_examples():
    pts = np.zeros((3, 3, 3))
    pts[..., 2] = 4.0
    pm = Pointmap(pts, np.ones((3, 3), bool), np.ones((3, 3)))
    valid_hole = pm.valid.copy()
    valid_hole[0, 0] = False
    img = np.full((3, 3, 3), 0.25)
    grid = VoxelGrid(0.5)
    refiners = (RefinerMLP("scale"), RefinerMLP("rotation"))
    I = Sim3Transform.identity()
    p0 = init_primitive((1, 1), pm, img, 1.0, 0, grid, refiners, I, 50.0, 0.25)
    assert p0.alpha == 0.2 and p0.d_max == 4.0 and p0.level == 0
    assert np.array_equal(grid.features[0], np.zeros(grid.dim)) and len(grid) == 1
    assert np.allclose(p0.S, p0.S_b) and np.array_equal(p0.R, [1.0, 0, 0, 0])
    assert np.allclose(sh_to_rgb(p0.color), 0.25)
    p2 = init_primitive((1, 1), pm, img, 0.5, 2, grid, refiners, I, 50.0, 0.25)
    assert p2.d_max == 64.0 and p2.alpha == 0.1
    assert p2.S_b == pytest.approx(p0.S_b * 1.4 ** 4)
    with pytest.raises(ValueError):
        init_primitive((0, 0), Pointmap(pts, valid_hole, pm.raw_conf), img, 1.0, 0, grid, refiners,
                       I, 50.0, 0.25)


def test_primitive_invariants():
    base = dict(mu=np.zeros(3), color=np.zeros(3), alpha=0.1, S_b=1.0, S=np.ones(3),
                R=np.array([1.0, 0, 0, 0]), f_l=np.zeros(4), v_id=0, level=0, d_max=1.0)
    GaussianPrimitive(**base)
    for bad in (dict(alpha=1.5), dict(S=np.array([1.0, 0.0, 1.0])), dict(d_max=0.0)):
        with pytest.raises(ValueError):
            GaussianPrimitive(**{**base, **bad})


def test_sh_round_trip():
    rgb = np.random.default_rng(0).uniform(0, 1, (10, 3))
    assert np.allclose(sh_to_rgb(rgb_to_sh(rgb)), rgb, atol=1e-15)


# ---------------------------------------------------------------- pyramid


def test_pyramid_sizes_and_degenerate(scene):
    _, img, pm, _ = scene
    pyr = build_lod_pyramid(img, pm, np.zeros_like(img), None, L=4)
    assert [p.image.shape[0] for p in pyr] == [64, 32, 16, 8]
    one = build_lod_pyramid(img, pm, np.zeros_like(img), None, L=1)
    assert len(one) == 1
    assert np.array_equal(one[0].mask.prob, insertion_probability(img, np.zeros_like(img)).prob)
    with pytest.raises(ValueError):
        build_lod_pyramid(img, pm, img, None, L=0)


def test_constant_frame_inserts_nothing(scene):
    _, _, pm, T = scene
    flat = np.full((64, 64, 3), 0.3)
    gmap = GaussianMap()
    assert gmap.insert_frame(0, flat, pm, np.full_like(flat, 0.7), None, T, 50.0) == 0
    assert len(gmap) == 0


def test_pointmap_downsampling_averages_valid_points():
    pts = np.zeros((2, 4, 3))
    pts[..., 2] = [[1, 2, 5, 5], [3, 4, 5, 5]]
    valid = np.array([[True, True, False, False], [True, False, False, False]])
    conf = np.array([[1.0, 0.5, 0, 0], [0.0, 1, 0, 0]])
    out, c2 = downsample_pointmap(Pointmap(pts, valid, np.ones((2, 4))), conf)
    assert out.shape == (1, 2)
    assert out.valid.tolist() == [[True, False]]
    assert out.points[0, 0, 2] == pytest.approx(2.0) and c2[0, 0] == pytest.approx(0.5)


def test_insert_frame_invariants(scene):
    _, img, pm, T = scene
    conf = np.random.default_rng(1).uniform(0.05, 1.0, pm.shape)
    gmap = GaussianMap()
    n = gmap.insert_frame(0, img, pm, np.zeros_like(img), conf, T, 50.0)
    assert n == len(gmap) > 0
    assert all(r.p_a > TAU_A for r in gmap.insertions)
    d = np.linalg.norm(gmap.mu - T.t, axis=1)
    lvl0 = gmap.level == 0
    assert np.allclose(gmap.d_max[lvl0], d[lvl0], rtol=1e-15)
    assert np.all(gmap.d_max >= d * (1 - 1e-15))
    assert np.array_equal(unpack_voxel(gmap.v_id), np.floor(gmap.mu / gmap.grid.eps).astype(np.int64))
    assert np.all((gmap.alpha > 0) & (gmap.alpha <= OPACITY_INIT))
    lvl0_recs = [r for r in gmap.insertions if r.level == 0]
    assert np.allclose(gmap.alpha[lvl0], OPACITY_INIT * conf[[r.v for r in lvl0_recs], [r.u for r in lvl0_recs]])
    assert sum(gmap.counts_per_level()) == n
    assert set(gmap.level.tolist()) <= set(range(gmap.cfg.levels))


def test_voxel_size_defaults_from_first_insertion(scene):
    _, img, pm, T = scene
    gmap = GaussianMap()
    gmap.insert_frame(0, img, pm, np.zeros_like(img), None, T, 50.0)
    assert gmap.grid.eps == pytest.approx(8.0 * np.median(gmap.S_b[gmap.level == 0]))
    fixed = GaussianMap(MapConfig(voxel_size=0.25))
    fixed.insert_frame(0, img, pm, np.zeros_like(img), None, T, 50.0)
    assert fixed.grid.eps == 0.25


@settings(max_examples=200)
@given(ijk=arrays(np.int64, (5, 3), elements=st.integers(-(1 << 20), (1 << 20) - 1)))
def test_voxel_packing_round_trip(ijk):
    assert np.array_equal(unpack_voxel(pack_voxel(ijk)), ijk)


def test_voxel_grid_rows():
    g = VoxelGrid(1.0, dim=4)
    keys = g.keys_for(np.array([[0.5, 0.5, 0.5], [1.5, 0, 0], [0.2, 0.9, 0.1]]))
    rows = g.ensure(keys)
    assert rows.tolist() == [0, 1, 0] and g.features.shape == (2, 4) and not g.features.any()
    with pytest.raises(ValueError):
        VoxelGrid(0.0)


# ---------------------------------------------------------------- level of detail


def test_lod_examples():
    d_max = np.array([2.0, 2.0, 2.0, 2.0])
    mu = np.array([[1.0, 0, 0], [5.0, 0, 0], [3.0, 0, 0], [2.0, 0, 0]])
    idx, w = lod_select(d_max, mu, np.zeros(3))
    assert idx.tolist() == [0, 2, 3]
    assert w.tolist() == [1.0, 0.5, 1.0]


@settings(max_examples=300)
@given(d_max=st.floats(0.01, 100), k=st.floats(0, 3))
def test_fade_is_continuous_and_decreasing(d_max, k):
    w = fade_weights(k * d_max, d_max)
    assert 0.0 <= w <= 1.0
    assert fade_weights(k * d_max * 1.01, d_max) <= w
    assert fade_weights(d_max, d_max) == 1.0
    assert fade_weights(2 * d_max, d_max) == 0.0
    assert fade_weights(d_max * (1 + 1e-9), d_max) == pytest.approx(1.0, abs=1e-8)


def test_literal_fade_flag():
    assert fade_weights(1.5, 1.0, literal=True) == 0.5
    assert fade_weights(1.9, 1.0, literal=True) > fade_weights(1.1, 1.0, literal=True)


# ---------------------------------------------------------------- refiners


def test_refiners_identity_at_initialization():
    rng = np.random.default_rng(0)
    s, r = RefinerMLP("scale"), RefinerMLP("rotation")
    feats = rng.normal(size=(6, 32))
    assert np.array_equal(refine_scale(s, feats), np.ones((6, 3)))
    assert np.array_equal(refine_rot(r, feats), np.tile([1.0, 0, 0, 0], (6, 1)))
    assert np.array_equal(refine_scale(s, np.zeros(32)), np.ones(3))
    with pytest.raises(ValueError):
        s(np.zeros(31))
    with pytest.raises(ValueError):
        refine_scale(r, np.zeros(32))
    with pytest.raises(ValueError):
        RefinerMLP("shear")


@settings(max_examples=100)
@given(f=arrays(float, 32, elements=st.floats(-5, 5)), seed=st.integers(0, 1000))
def test_rotation_output_is_unit(f, seed):
    r = RefinerMLP("rotation", rng=np.random.default_rng(seed))
    r.params["W2"] = np.random.default_rng(seed + 1).normal(size=r.params["W2"].shape)
    assert abs(np.linalg.norm(r(f)) - 1) < 1e-9


@pytest.mark.parametrize("kind", ["scale", "rotation"])
def test_refiner_parameter_gradients(kind):
    rng = np.random.default_rng(4)
    mlp = RefinerMLP(kind, rng=rng)
    mlp.params["W2"] = rng.normal(0, 0.5, mlp.params["W2"].shape)
    x = rng.normal(size=(5, 32))
    out_dim = 3 if kind == "scale" else 4
    c = rng.normal(size=(5, out_dim))

    def loss():
        return float(np.sum(c * mlp(x)))

    y, cache = mlp.forward(x)
    grads, dx = mlp.backward(cache, c)
    h = 1e-6
    for name, P in mlp.params.items():
        d = rng.normal(size=P.shape)
        P += h * d
        lp = loss()
        P -= 2 * h * d
        lm = loss()
        P += h * d
        num = (lp - lm) / (2 * h)
        assert abs(num - np.sum(grads[name] * d)) <= 1e-4 * max(abs(num), 1e-8)


# ---------------------------------------------------------------- export


def test_export_round_trip(tmp_path, scene):
    _, img, pm, T = scene
    gmap = GaussianMap()
    gmap.insert_frame(0, img, pm, np.zeros_like(img), None, sim3_exp(np.full(7, 0.01)) @ T, 50.0)
    path = tmp_path / "map.adgs"
    write_map(path, gmap)
    snap, ref = read_map(path), gmap.snapshot()
    assert len(snap) == len(ref)
    assert np.array_equal(snap.mu, ref.mu.astype(np.float32).astype(float))
    assert np.allclose(snap.rgb, ref.rgb, atol=1e-6)
    assert np.array_equal(snap.level, ref.level) and np.array_equal(snap.v_id, ref.v_id)
    assert np.allclose(snap.scales, ref.scales, rtol=1e-6) and np.allclose(snap.quats, ref.quats, atol=1e-6)
    feat = (tmp_path / "map.adgs.feat").read_bytes()
    assert feat[:4] == b"ADGF"
    raw = path.read_bytes()
    assert raw[:4] == b"ADGS" and len(raw) == 12 + len(gmap) * 72
    path.write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        read_map(path)
