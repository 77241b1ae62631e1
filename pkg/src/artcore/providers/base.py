"""Data exchanged with pointmap providers and the provider interface itself."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..geometry import CameraIntrinsics, Sim3Transform


class ProviderError(RuntimeError):
    """A provider could not produce the requested output (missing file, unsupported call...)."""


@dataclass(frozen=True)
class Frame:
    id: int
    timestamp: float
    image: np.ndarray  # H x W x 3, float in [0, 1]
    intrinsics: CameraIntrinsics | None = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Pointmap:
    """Per-pixel camera-frame points with a validity mask and raw confidence."""

    points: np.ndarray  # H x W x 3
    valid: np.ndarray  # H x W bool
    raw_conf: np.ndarray  # H x W in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.raw_conf = np.asarray(self.raw_conf, dtype=float)
        if self.points.shape[:2] != self.valid.shape or self.valid.shape != self.raw_conf.shape:
            raise ValueError("pointmap arrays disagree in shape")
        if np.any(self.valid):
            p = self.points[self.valid]
            if not np.all(np.isfinite(p)) or np.any(p[:, 2] <= 0):
                raise ValueError("valid pointmap entries must be finite with positive depth")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def lookup(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Points at the nearest integer pixel; returns (points, valid)."""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        H, W = self.shape
        ij = np.rint(pixels).astype(int)
        inside = (ij[:, 0] >= 0) & (ij[:, 0] < W) & (ij[:, 1] >= 0) & (ij[:, 1] < H)
        out = np.zeros((len(ij), 3))
        ok = np.zeros(len(ij), dtype=bool)
        u, v = ij[inside, 0], ij[inside, 1]
        out[inside] = self.points[v, u]
        ok[inside] = self.valid[v, u]
        return out, ok

    def valid_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """(pixel coordinates (N, 2) as (u, v), points (N, 3)) of all valid entries."""
        v, u = np.nonzero(self.valid)
        return np.stack([u, v], axis=1).astype(float), self.points[v, u]


@dataclass
class GaugePointmap(Pointmap):
    """Pointmap in an arbitrary shared frame; the depth sign carries no meaning."""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.raw_conf = np.asarray(self.raw_conf, dtype=float)


@dataclass
class CorrespondenceSet:
    """Matched pixels between current frame ``c`` and keyframe ``k`` plus both 3D points."""

    c: int
    k: int
    pix_c: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    pix_k: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    P_c: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    P_k: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.pix_c = np.asarray(self.pix_c, dtype=float).reshape(-1, 2)
        self.pix_k = np.asarray(self.pix_k, dtype=float).reshape(-1, 2)
        self.P_c = np.asarray(self.P_c, dtype=float).reshape(-1, 3)
        self.P_k = np.asarray(self.P_k, dtype=float).reshape(-1, 3)
        n = len(self.pix_c)
        if not (len(self.pix_k) == len(self.P_c) == len(self.P_k) == n):
            raise ValueError("correspondence arrays disagree in length")

    def __len__(self) -> int:
        return len(self.pix_c)

    def __iter__(self):
        for m in range(len(self)):
            yield self.pix_c[m], self.pix_k[m], self.P_c[m], self.P_k[m]

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(self.c, self.k, self.pix_c[mask], self.pix_k[mask],
                                 self.P_c[mask], self.P_k[mask])

    def swapped(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.k, self.c, self.pix_k, self.pix_c, self.P_k, self.P_c)

    def displacements(self) -> np.ndarray:
        return np.linalg.norm(self.pix_c - self.pix_k, axis=1)


class PointmapProvider(abc.ABC):
    """Stand-in for the neural modules: two-view matcher, multi-view loop geometry,
    retrieval similarity and focal estimation."""

    @abc.abstractmethod
    def frame_ids(self) -> list[int]: ...

    @abc.abstractmethod
    def frame(self, frame_id: int) -> Frame: ...

    @abc.abstractmethod
    def pointmap(self, frame_id: int) -> Pointmap: ...

    @abc.abstractmethod
    def match(self, frame_a: Frame, frame_b: Frame) -> tuple[Pointmap, Pointmap, CorrespondenceSet]: ...

    @abc.abstractmethod
    def retrieval_score(self, query: int, candidate: int) -> float: ...

    @abc.abstractmethod
    def multi_frame_pointmaps(self, frame_ids: Sequence[int]) -> list[Pointmap]: ...

    @abc.abstractmethod
    def focal_estimate(self, frame: Frame) -> float: ...

    def ground_truth(self) -> dict[int, Sim3Transform] | None:
        return None

    def frames(self):
        for i in self.frame_ids():
            yield self.frame(i)
