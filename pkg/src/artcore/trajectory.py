"""Trajectory I/O (TUM text format), timestamp association and Sim(3) alignment."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Sim3Transform, matrix_to_quat

ASSOCIATION_WINDOW = 0.02


class TrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Sim3Transform]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).ravel()
        if len(self.timestamps) != len(self.poses):
            raise TrajectoryError("timestamps and poses differ in length")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([T.t for T in self.poses])


def format_tum_line(stamp: float, T: Sim3Transform, with_scale: bool = False) -> str:
    w, x, y, z = T.q
    vals = [stamp, *T.t, x, y, z, w] + ([T.s] if with_scale else [])
    return " ".join(repr(float(v)) for v in vals)


def write_tum(path, traj: Trajectory, with_scale: bool = False) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines; ``with_scale`` appends the Sim(3) scale."""
    lines = ["# timestamp tx ty tz qx qy qz qw" + (" s" if with_scale else "")]
    lines += [format_tum_line(t, T, with_scale) for t, T in zip(traj.timestamps, traj.poses)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_tum(text: str) -> Trajectory:
    stamps, poses = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in (8, 9):
            raise TrajectoryError(f"line {lineno}: expected 8 or 9 fields, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
        except ValueError as e:
            raise TrajectoryError(f"line {lineno}: {e}") from e
        s = v[8] if len(v) == 9 else 1.0
        q = np.array([v[7], v[4], v[5], v[6]])
        n = np.linalg.norm(q)
        if not n > 0:
            raise TrajectoryError(f"line {lineno}: zero quaternion")
        stamps.append(v[0])
        poses.append(Sim3Transform(s, q / n, np.array(v[1:4])))
    return Trajectory(np.array(stamps), poses)


def read_tum(path) -> Trajectory:
    return parse_tum(Path(path).read_text())


def associate(t_est, t_gt, window: float = ASSOCIATION_WINDOW) -> list[tuple[int, int]]:
    """Greedy one-to-one timestamp matching, closest pairs first, within ``window`` seconds."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return []
    order = np.argsort(t_gt, kind="stable")
    sorted_gt = t_gt[order]
    cand = []
    for i, t in enumerate(t_est):
        pos = np.searchsorted(sorted_gt, t)
        for p in (pos - 1, pos, pos + 1):
            if 0 <= p < len(sorted_gt):
                d = abs(sorted_gt[p] - t)
                if d <= window:
                    cand.append((d, i, int(order[p])))
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity ``S`` minimising ``sum ||dst - S(src)||^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise TrajectoryError("umeyama needs two (N, 3) arrays")
    if len(src) < 3:
        raise TrajectoryError(f"need at least 3 point pairs, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    if not var_s > 0:
        raise TrajectoryError("source points are all identical")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    E = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        E[2, 2] = -1.0
    R = U @ E @ Vt
    s = float(np.sum(D * np.diag(E)) / var_s) if with_scale else 1.0
    if not s > 0:
        raise TrajectoryError("degenerate point configuration")
    t = mu_d - s * R @ mu_s
    return Sim3Transform(s, matrix_to_quat(R), t)


@dataclass(frozen=True)
class AlignmentResult:
    alignment: Sim3Transform  # maps estimated positions onto ground truth
    ate_rmse: float
    n_pairs: int
    errors: np.ndarray


def umeyama_align(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW,
                  with_scale: bool = True) -> AlignmentResult:
    pairs = associate(est.timestamps, gt.timestamps, window)
    if len(pairs) < 3:
        raise TrajectoryError(f"only {len(pairs)} associated poses; need 3")
    ie, ig = np.array(pairs).T
    P = est.positions()[ie]
    Q = gt.positions()[ig]
    S = umeyama(P, Q, with_scale)
    err = np.linalg.norm(Q - S.apply(P), axis=1)
    return AlignmentResult(S, float(np.sqrt(np.mean(err ** 2))), len(pairs), err)


def ate_rmse(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> float:
    return umeyama_align(est, gt, window).ate_rmse
