"""Keyframe factor graph: loop detection, global bundle adjustment over Sim(3), and
reprojection-based pointmap confidence."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import huber_cost, huber_weights, solve_damped
from .geometry import (BehindCameraError, CameraIntrinsics, Sim3Transform, point_tangent_jacobian,
                       project_points, projection_jacobian, sim3_exp)
from .providers.base import CorrespondenceSet, Pointmap, ProviderError
from .trajectory import TrajectoryError, umeyama

log = logging.getLogger(__name__)

SEQUENTIAL = "sequential"
LOOP = "loop"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    score_threshold: float = 0.005
    k_loop: int = 10
    n_a_max: int = 23
    n_a_min: int = 11
    n_select: int = 3
    theta_max_deg: float = 2.0
    rho_max: float = 0.05
    consistency_ratio: float = 0.15
    huber_delta: float = 1.345
    huber_eps: float = 1e-9
    gba_iters_keyframe: int = 5
    gba_iters_loop: int = 50
    gba_eps: float = 1e-8
    eps_c: float = 3.0
    c_floor: float = 0.1
    n_conf: int = 3
    min_edge_corrs: int = 12
    loop_closure: bool = True

    def __post_init__(self):
        if self.k_loop < 1 or self.n_select < 1 or self.n_conf < 1:
            raise ValueError("backend counts must be positive")
        if not 0 < self.c_floor <= 1:
            raise ValueError("c_floor must lie in (0, 1]")
        if not self.eps_c >= 0:
            raise ValueError("eps_c must be non-negative")


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    corrs: CorrespondenceSet  # c = i, k = j
    kind: str = SEQUENTIAL
    conf: np.ndarray | None = None  # per-correspondence raw confidence, defaults to 1


class FactorGraph:
    """Keyframe poses ``T_wi`` (camera to world) and correspondence edges. The first node
    added is the gauge anchor."""

    def __init__(self):
        self.nodes: "OrderedDict[int, Sim3Transform]" = OrderedDict()
        self.edges: list[Edge] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def anchor(self) -> int:
        if not self.nodes:
            raise GraphError("empty graph has no anchor")
        return next(iter(self.nodes))

    @property
    def latest(self) -> int:
        return next(reversed(self.nodes))

    def add_node(self, node_id: int, T_wi: Sim3Transform) -> None:
        if node_id in self.nodes:
            raise GraphError(f"node {node_id} already present")
        if self.nodes and node_id < self.latest:
            raise GraphError("keyframe ids must increase")
        self.nodes[node_id] = T_wi

    def add_edge(self, i: int, j: int, corrs: CorrespondenceSet, kind: str = SEQUENTIAL,
                 conf=None) -> Edge:
        if i not in self.nodes or j not in self.nodes:
            raise GraphError(f"edge ({i}, {j}) references a missing node")
        if i == j:
            raise GraphError("self edges are not allowed")
        if kind not in (SEQUENTIAL, LOOP):
            raise GraphError(f"unknown edge kind {kind!r}")
        if corrs.c != i or corrs.k != j:
            corrs = CorrespondenceSet(i, j, corrs.pix_c, corrs.pix_k, corrs.P_c, corrs.P_k)
        e = Edge(i, j, corrs, kind, None if conf is None else np.asarray(conf, dtype=float))
        self.edges.append(e)
        return e

    def index(self, node_id: int) -> int:
        """Insertion order of a keyframe, used for keyframe-granularity gaps."""
        return list(self.nodes).index(node_id)

    def neighbors(self, node_id: int) -> list[int]:
        out = []
        for e in self.edges:
            if e.i == node_id:
                out.append(e.j)
            elif e.j == node_id:
                out.append(e.i)
        return sorted(set(out))

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        seen = {self.anchor}
        stack = [self.anchor]
        adj: dict[int, set[int]] = {n: set() for n in self.nodes}
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        while stack:
            n = stack.pop()
            for m in adj[n] - seen:
                seen.add(m)
                stack.append(m)
        return len(seen) == len(self.nodes)

    def poses(self) -> dict[int, Sim3Transform]:
        """Copy of the current poses (Sim3Transform is immutable, so this is a snapshot)."""
        return dict(self.nodes)

    def set_poses(self, poses: dict[int, Sim3Transform]) -> None:
        for k, T in poses.items():
            if k not in self.nodes:
                raise GraphError(f"unknown node {k}")
            self.nodes[k] = T

    def dump(self) -> str:
        lines = []
        for k, T in self.nodes.items():
            w, x, y, z = T.q
            vals = [*T.t, x, y, z, w, T.s]
            lines.append(f"NODE {k} " + " ".join(repr(float(v)) for v in vals))
        for e in self.edges:
            lines.append(f"EDGE {e.i} {e.j} {e.kind} {len(e.corrs)}")
        return "\n".join(lines) + "\n"

    def write_dump(self, path) -> None:
        Path(path).write_text(self.dump())


# ---------------------------------------------------------------------------
# residuals and Jacobians


def gba_residuals(P_i: np.ndarray, pix_j: np.ndarray, Z_j: np.ndarray, T_wi: Sim3Transform,
                  T_wj: Sim3Transform, K: CameraIntrinsics) -> np.ndarray:
    """Predicted minus observed ``(u, v, log Z)`` in frame ``j`` for points given in frame ``i``."""
    P_j = T_wj.inverse().apply(T_wi.apply(P_i))
    if np.any(P_j[..., 2] <= 0):
        raise BehindCameraError("point behind camera j")
    pred = project_points(P_j, K)
    obs = np.concatenate([np.asarray(pix_j, dtype=float),
                          np.log(np.asarray(Z_j, dtype=float))[..., None]], axis=-1)
    return pred - obs


def pose_pair_jacobians(P_i: np.ndarray, T_wi: Sim3Transform, T_wj: Sim3Transform,
                        K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the residual w.r.t. left increments of ``T_wi`` and ``T_wj``.

    With ``T <- exp(d) T`` on both poses, ``P_j = T_wj^-1 exp(-d_j) exp(d_i) P_w``, so the
    two blocks are exact negatives of each other: a common left increment is the gauge.
    """
    P_i = np.asarray(P_i, dtype=float)
    P_w = T_wi.apply(P_i)
    inv_j = T_wj.inverse()
    P_j = inv_j.apply(P_w)
    if np.any(P_j[..., 2] <= 0):
        raise BehindCameraError("point behind camera j")
    A = inv_j.s * inv_j.R
    Jp = projection_jacobian(P_j, K.fx, K.fy)
    J_i = np.einsum("...ij,jk,...kl->...il", Jp, A, point_tangent_jacobian(P_w))
    return J_i, -J_i


@dataclass
class _Term:
    a: int  # frame holding the points
    b: int  # frame observing them
    P: np.ndarray
    pix: np.ndarray
    Z: np.ndarray
    conf: np.ndarray


def _graph_terms(graph: FactorGraph) -> list[_Term]:
    terms = []
    for e in graph.edges:
        c = e.corrs
        if len(c) == 0:
            continue
        conf = np.ones(len(c)) if e.conf is None else e.conf
        terms.append(_Term(e.i, e.j, c.P_c, c.pix_k, c.P_k[:, 2], conf))
        terms.append(_Term(e.j, e.i, c.P_k, c.pix_c, c.P_c[:, 2], conf))
    return terms


def _in_front(term: _Term, poses) -> np.ndarray:
    P_j = poses[term.b].inverse().apply(poses[term.a].apply(term.P))
    return P_j[:, 2] > 0


@dataclass(frozen=True)
class GBAResult:
    poses: dict[int, Sim3Transform]
    iterations: int
    initial_energy: float
    final_energy: float
    converged: bool
    energies: tuple[float, ...] = ()


class _GBAProblem:
    def __init__(self, graph: FactorGraph, K: CameraIntrinsics, cfg: BackendConfig):
        self.K, self.cfg = K, cfg
        self.ids = list(graph.nodes)
        self.anchor = graph.anchor
        self.free = [n for n in self.ids if n != self.anchor]
        self.col = {n: 7 * k for k, n in enumerate(self.free)}
        poses = graph.poses()
        self.terms = []
        for t in _graph_terms(graph):
            keep = _in_front(t, poses)
            if not np.all(keep):
                log.debug("dropping %d behind-camera residuals on (%d, %d)", np.sum(~keep), t.a, t.b)
                t = _Term(t.a, t.b, t.P[keep], t.pix[keep], t.Z[keep], t.conf[keep])
            if len(t.P):
                self.terms.append(t)

    def residuals(self, poses) -> list[np.ndarray]:
        return [gba_residuals(t.P, t.pix, t.Z, poses[t.a], poses[t.b], self.K) for t in self.terms]

    def energy(self, res: list[np.ndarray]) -> float:
        d = self.cfg.huber_delta
        return float(sum(np.sum(t.conf * 2.0 * huber_cost(np.linalg.norm(r, axis=1), d))
                         for t, r in zip(self.terms, res)))

    def normal_equations(self, poses, res):
        n = 7 * len(self.free)
        H = np.zeros((n, n))
        g = np.zeros(n)
        for t, r in zip(self.terms, res):
            s = np.linalg.norm(r, axis=1)
            w = t.conf * huber_weights(s, self.cfg.huber_delta, self.cfg.huber_eps)
            J, _ = pose_pair_jacobians(t.P, poses[t.a], poses[t.b], self.K)
            A = np.einsum("mri,m,mrj->ij", J, w, J)
            b = np.einsum("mri,m,mr->i", J, w, r)
            ca, cb = self.col.get(t.a), self.col.get(t.b)
            # J_b = -J_a, so the blocks follow from A and b alone
            if ca is not None:
                H[ca:ca + 7, ca:ca + 7] += A
                g[ca:ca + 7] += b
            if cb is not None:
                H[cb:cb + 7, cb:cb + 7] += A
                g[cb:cb + 7] -= b
            if ca is not None and cb is not None:
                H[ca:ca + 7, cb:cb + 7] -= A
                H[cb:cb + 7, ca:ca + 7] -= A
        return H, g

    def retract(self, poses, step):
        out = dict(poses)
        for n in self.free:
            c = self.col[n]
            out[n] = sim3_exp(step[c:c + 7]).compose(poses[n])
        return out


def global_bundle_adjust(graph: FactorGraph, K: CameraIntrinsics, max_iters: int = 50,
                         eps: float = 1e-8, cfg: BackendConfig | None = None) -> GBAResult:
    """Levenberg-Marquardt over all non-anchor keyframe poses; updates ``graph`` in place."""
    cfg = cfg or BackendConfig()
    if not graph.is_connected():
        raise GraphError("global bundle adjustment needs a connected graph")
    poses = graph.poses()
    if len(graph) < 2:
        return GBAResult(poses, 0, 0.0, 0.0, True, (0.0,))
    prob = _GBAProblem(graph, K, cfg)
    res = prob.residuals(poses)
    E = E0 = prob.energy(res)
    energies = [E]
    lam, rejections, converged, it = 0.0, 0, False, 0
    for it in range(1, max_iters + 1):
        H, g = prob.normal_equations(poses, res)
        if not np.any(g):
            converged = True
            break
        try:
            step = solve_damped(H, g, lam)
        except np.linalg.LinAlgError:
            log.warning("GBA normal equations singular; stopping")
            break
        if np.max(np.abs(step)) < eps:
            converged = True
            break
        trial = prob.retract(poses, step)
        try:
            res_new = prob.residuals(trial)
            E_new = prob.energy(res_new)
        except BehindCameraError:
            E_new = np.inf
        if E_new <= E:
            resolved = E - E_new <= 1e-13 * E
            poses, res, E = trial, res_new, E_new
            energies.append(E)
            rejections = 0
            lam = 0.0 if lam <= 1e-6 else lam / 10.0
            if resolved:
                converged = True
                break
        else:
            rejections += 1
            lam = 1e-6 if lam == 0 else lam * 10.0
            if rejections >= 3:
                break
    graph.set_poses(poses)
    return GBAResult(graph.poses(), it, E0, E, converged, tuple(energies))


def keyframe_residuals(graph: FactorGraph, K: CameraIntrinsics) -> dict[int, float]:
    """Largest pixel reprojection residual over all edges touching each keyframe."""
    poses = graph.poses()
    out = {n: 0.0 for n in graph.nodes}
    for t in _graph_terms(graph):
        keep = _in_front(t, poses)
        if not np.any(keep):
            continue
        r = gba_residuals(t.P[keep], t.pix[keep], t.Z[keep], poses[t.a], poses[t.b], K)
        m = float(np.max(np.linalg.norm(r[:, :2], axis=1)))
        out[t.a] = max(out[t.a], m)
        out[t.b] = max(out[t.b], m)
    return out


# ---------------------------------------------------------------------------
# loop detection


@dataclass(frozen=True)
class LoopDecision:
    detected: bool
    selected: tuple[int, ...] = ()
    scores: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    verified: bool = False  # whether multi-frame geometric verification ran

    def __post_init__(self):
        if self.selected and not self.detected:
            raise ValueError("selected candidates require detected=True")


def loop_candidates(graph: FactorGraph, query: int, provider, cfg: BackendConfig) -> dict[int, float]:
    """History keyframes at least ``k_loop`` keyframes older with retrieval score above threshold."""
    order = list(graph.nodes)
    q_idx = order.index(query) if query in graph.nodes else len(order)
    out = {}
    for idx, kf in enumerate(order):
        if kf == query or q_idx - idx < cfg.k_loop:
            continue
        s = float(provider.retrieval_score(query, kf))
        if s > cfg.score_threshold:
            out[kf] = s
    return out


def _ranked(scores: dict[int, float]) -> list[int]:
    return sorted(scores, key=lambda k: (-scores[k], k))


def consistency_ratio(P_q: np.ndarray, P_c: np.ndarray, theta_max_deg: float, rho_max: float) -> float:
    """Fraction of point pairs (query-camera frame) with ray angle and relative depth inside tolerance."""
    if len(P_q) == 0:
        return 0.0
    nq = np.linalg.norm(P_q, axis=1)
    nc = np.linalg.norm(P_c, axis=1)
    cosang = np.einsum("ij,ij->i", P_q, P_c) / np.maximum(nq * nc, 1e-300)
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    depth_err = np.abs(P_c[:, 2] - P_q[:, 2]) / np.abs(P_q[:, 2])
    ok = (ang < theta_max_deg) & (depth_err < rho_max) & (P_q[:, 2] > 0)
    return float(np.mean(ok))


def geometric_verify(query: int, candidates: Sequence[int], provider,
                     cfg: BackendConfig | None = None) -> tuple[list[int], dict[int, float]]:
    """Rank candidates by multi-frame geometric consistency with the query; keep up to three."""
    cfg = cfg or BackendConfig()
    candidates = list(candidates)
    if not candidates:
        raise ValueError("geometric verification needs at least one candidate")
    try:
        pms = provider.multi_frame_pointmaps([query, *candidates])
        own = provider.pointmap(query)
        f_q = provider.frame(query)
        both = pms[0].valid & own.valid
        gauge = umeyama(pms[0].points[both], own.points[both])
        ratios = {}
        for cand, pm in zip(candidates, pms[1:]):
            _, _, corrs = provider.match(f_q, provider.frame(cand))
            if len(corrs) == 0:
                ratios[cand] = 0.0
                continue
            Pq, vq = pms[0].lookup(corrs.pix_c)
            Pc, vc = pm.lookup(corrs.pix_k)
            ok = vq & vc
            n_total = len(corrs)
            r = consistency_ratio(gauge.apply(Pq[ok]), gauge.apply(Pc[ok]), cfg.theta_max_deg,
                                  cfg.rho_max)
            ratios[cand] = r * np.count_nonzero(ok) / n_total
    except (ProviderError, TrajectoryError) as e:
        log.warning("geometric verification of %d failed: %s", query, e)
        return [], {}
    passing = [c for c in candidates if ratios[c] > cfg.consistency_ratio]
    passing.sort(key=lambda c: (-ratios[c], c))
    return passing[:cfg.n_select], ratios


def detect_loop(graph: FactorGraph, query: int, provider, cfg: BackendConfig) -> LoopDecision:
    try:
        scores = loop_candidates(graph, query, provider, cfg)
    except ProviderError as e:
        log.warning("retrieval failed for %d: %s", query, e)
        return LoopDecision(False)
    n_c = len(scores)
    if n_c == 0:
        return LoopDecision(False, (), scores)
    n_a = min(cfg.n_a_max, n_c)
    ranked = _ranked(scores)
    if n_a < cfg.n_a_min:
        # too few candidates to run the multi-frame module: take retrieval's best directly
        return LoopDecision(True, tuple(ranked[:cfg.n_select]), scores)
    selected, ratios = geometric_verify(query, ranked[:n_a], provider, cfg)
    return LoopDecision(bool(selected), tuple(selected), scores, ratios, True)


def update_graph(graph: FactorGraph, new_kf: int, T_w_new: Sim3Transform, provider,
                 cfg: BackendConfig | None = None, seq_corrs: CorrespondenceSet | None = None
                 ) -> tuple[LoopDecision, list[Edge]]:
    """Insert a keyframe, link it to the latest keyframe and, on a detected loop, to the
    selected loop candidates."""
    cfg = cfg or BackendConfig()
    if not graph.nodes:
        graph.add_node(new_kf, T_w_new)
        return LoopDecision(False), []
    prev = graph.latest
    graph.add_node(new_kf, T_w_new)
    if seq_corrs is None:
        _, _, seq_corrs = provider.match(provider.frame(new_kf), provider.frame(prev))
    edges = [graph.add_edge(new_kf, prev, seq_corrs, SEQUENTIAL)]
    if not cfg.loop_closure:
        return LoopDecision(False), edges
    decision = detect_loop(graph, new_kf, provider, cfg)
    for cand in decision.selected:
        try:
            _, _, corrs = provider.match(provider.frame(new_kf), provider.frame(cand))
        except ProviderError as e:
            log.warning("loop match %d-%d failed: %s", new_kf, cand, e)
            continue
        if len(corrs) < cfg.min_edge_corrs:
            continue
        edges.append(graph.add_edge(new_kf, cand, corrs, LOOP))
    return decision, edges


# ---------------------------------------------------------------------------
# confidence


def confidence_from_error(e_bar, eps_c: float = 3.0):
    """1 up to ``eps_c``, then ``1 / (e_bar - eps_c + 1)``."""
    e = np.asarray(e_bar, dtype=float)
    out = np.where(e <= eps_c, 1.0, 1.0 / (np.maximum(e - eps_c, 0.0) + 1.0))
    return float(out) if out.ndim == 0 else out


def pointmap_confidence(pointmap: Pointmap, neighbors: Sequence[tuple[Pointmap, Sim3Transform]],
                        K: CameraIntrinsics, eps_c: float = 3.0, c_floor: float = 0.1) -> np.ndarray:
    """Per-pixel confidence from the mean round-trip reprojection error against neighbour
    keyframes. ``neighbors`` holds ``(pointmap_j, T_jc)`` with ``T_jc`` mapping this frame's
    camera coordinates into frame ``j``."""
    if not neighbors:
        raise ValueError("confidence needs at least one neighbour keyframe")
    H, W = pointmap.shape
    uv, X = pointmap.valid_pixels()
    err_sum = np.zeros(len(X))
    n_obs = np.zeros(len(X), dtype=int)
    for pm_j, T_jc in neighbors:
        Y = T_jc.apply(X)
        front = Y[:, 2] > 0
        pix = np.full((len(X), 2), -1e9)
        pix[front] = project_points(Y[front], K)[:, :2]
        Hj, Wj = pm_j.shape
        inside = front & (pix[:, 0] > -0.5) & (pix[:, 0] < Wj - 0.5) & (pix[:, 1] > -0.5) & (pix[:, 1] < Hj - 0.5)
        Yj, ok = pm_j.lookup(pix)
        ok &= inside
        Xb = T_jc.inverse().apply(Yj[ok])
        fwd = Xb[:, 2] > 0
        idx = np.flatnonzero(ok)[fwd]
        back = project_points(Xb[fwd], K)[:, :2]
        err_sum[idx] += np.linalg.norm(back - uv[idx], axis=1)
        n_obs[idx] += 1
    C = np.full((H, W), float(c_floor))
    seen = n_obs > 0
    e_bar = err_sum[seen] / n_obs[seen]
    iu = uv[seen].astype(int)
    C[iu[:, 1], iu[:, 0]] = confidence_from_error(e_bar, eps_c)
    return C


# ---------------------------------------------------------------------------
# stateful backend


@dataclass(frozen=True)
class KeyframeUpdate:
    keyframe_id: int
    decision: LoopDecision
    gba: GBAResult | None
    poses: dict[int, Sim3Transform]


class Backend:
    """Owns the factor graph; publishes pose snapshots after each update."""

    def __init__(self, provider, cfg: BackendConfig | None = None):
        self.provider = provider
        self.cfg = cfg or BackendConfig()
        self.graph = FactorGraph()
        self.loops: list[tuple[int, int]] = []

    def add_keyframe(self, kf_id: int, T_wk: Sim3Transform, K: CameraIntrinsics,
                     seq_corrs: CorrespondenceSet | None = None) -> KeyframeUpdate:
        decision, edges = update_graph(self.graph, kf_id, T_wk, self.provider, self.cfg, seq_corrs)
        self.loops += [(e.i, e.j) for e in edges if e.kind == LOOP]
        gba = None
        if len(self.graph) > 1:
            iters = self.cfg.gba_iters_loop if decision.detected else self.cfg.gba_iters_keyframe
            gba = global_bundle_adjust(self.graph, K, iters, self.cfg.gba_eps, self.cfg)
        return KeyframeUpdate(kf_id, decision, gba, self.graph.poses())

    def confidence_neighbors(self, frame_id: int) -> list[int]:
        cands = [k for k in self.graph.nodes if k != frame_id]
        scored = {k: float(self.provider.retrieval_score(frame_id, k)) for k in cands}
        return _ranked(scored)[:self.cfg.n_conf]

    def confidence(self, frame_id: int, T_wf: Sim3Transform, K: CameraIntrinsics,
                   pointmap: Pointmap | None = None) -> np.ndarray:
        pm = pointmap if pointmap is not None else self.provider.pointmap(frame_id)
        nbrs = self.confidence_neighbors(frame_id)
        if not nbrs:
            return np.where(pm.valid, 1.0, self.cfg.c_floor)
        pairs = [(self.provider.pointmap(j), self.graph.nodes[j].inverse().compose(T_wf))
                 for j in nbrs]
        return pointmap_confidence(pm, pairs, K, self.cfg.eps_c, self.cfg.c_floor)
