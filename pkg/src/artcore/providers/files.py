"""Provider backed by a directory of precomputed network outputs.

Layout (all names relative to the dataset root)::

    frames.txt                 frame_id timestamp image_file   (one frame per line)
    intrinsics.txt             fx fy cx cy width height        (optional)
    pointmap_{id:06}.adpm      per-frame pointmap in camera coordinates
    corr_{c:06}_{k:06}.txt     correspondences of frame c against frame k (either order)
    world_{id:06}.adpm         multi-frame pointmap in one shared gauge (loop verification)
    retrieval.txt              query candidate score           (missing pairs score 0)
    focal_{id:06}.txt          single focal estimate in pixels
    groundtruth.txt            TUM trajectory                  (optional)
"""

from __future__ import annotations

import itertools
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..geometry import CameraIntrinsics, Sim3Transform
from ..trajectory import Trajectory, TrajectoryError, associate, read_tum, write_tum
from .base import CorrespondenceSet, Frame, GaugePointmap, Pointmap, PointmapProvider, ProviderError
from .formats import (correspondence_filename, pointmap_filename, read_correspondences,
                      read_pointmap, write_correspondences, write_pointmap)


def world_pointmap_filename(frame_id: int) -> str:
    return f"world_{frame_id:06}.adpm"


def focal_filename(frame_id: int) -> str:
    return f"focal_{frame_id:06}.txt"


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except OSError as e:
        raise ProviderError(f"cannot read image {path}: {e}") from e


class FilesProvider(PointmapProvider):
    """Reads frames lazily; pointmaps and correspondences are cached after the first read."""

    def __init__(self, root):
        self.root = Path(root)
        listing = self.root / "frames.txt"
        if not listing.is_file():
            raise ProviderError(f"{listing} not found")
        self._entries: dict[int, tuple[float, str]] = {}
        last = None
        for lineno, line in enumerate(listing.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ProviderError(f"frames.txt:{lineno}: expected 'id timestamp image'")
            fid = int(parts[0])
            if last is not None and fid <= last:
                raise ProviderError(f"frames.txt:{lineno}: frame ids must increase")
            last = fid
            self._entries[fid] = (float(parts[1]), parts[2])
        self.K = self._read_intrinsics()
        self._scores = self._read_scores()
        self._pm: dict[int, Pointmap] = {}
        self._frames: dict[int, Frame] = {}

    def _read_intrinsics(self) -> CameraIntrinsics | None:
        path = self.root / "intrinsics.txt"
        if not path.is_file():
            return None
        vals = path.read_text().split()
        if len(vals) != 6:
            raise ProviderError("intrinsics.txt: expected 'fx fy cx cy width height'")
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        return CameraIntrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]))

    def _read_scores(self) -> dict[tuple[int, int], float]:
        path = self.root / "retrieval.txt"
        out = {}
        if not path.is_file():
            return out
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            q, c, s = line.split()
            out[(int(q), int(c))] = float(s)
        return out

    def _check(self, frame_id) -> int:
        if int(frame_id) not in self._entries:
            raise KeyError(f"unknown frame id {frame_id}")
        return int(frame_id)

    # ---- interface

    def frame_ids(self) -> list[int]:
        return list(self._entries)

    def frame(self, frame_id: int) -> Frame:
        i = self._check(frame_id)
        if i not in self._frames:
            stamp, name = self._entries[i]
            img = _load_image(self.root / name)
            img.setflags(write=False)
            self._frames[i] = Frame(i, stamp, img, self.K)
        return self._frames[i]

    def pointmap(self, frame_id: int) -> Pointmap:
        i = self._check(frame_id)
        if i not in self._pm:
            try:
                self._pm[i] = read_pointmap(self.root / pointmap_filename(i))
            except ProviderError as e:
                raise ProviderError(f"frame {i}: {e}") from e
        return self._pm[i]

    def match(self, frame_a: Frame, frame_b: Frame):
        a, b = self._check(frame_a.id), self._check(frame_b.id)
        pm_a, pm_b = self.pointmap(a), self.pointmap(b)
        if a == b:
            pix, pts = pm_a.valid_pixels()
            return pm_a, pm_b, CorrespondenceSet(a, b, pix, pix.copy(), pts, pts.copy())
        direct = self.root / correspondence_filename(a, b)
        if direct.is_file():
            return pm_a, pm_b, read_correspondences(direct, a, b)
        reverse = self.root / correspondence_filename(b, a)
        if reverse.is_file():
            return pm_a, pm_b, read_correspondences(reverse, b, a).swapped()
        raise ProviderError(f"frames {a}/{b}: no correspondence file")

    def retrieval_score(self, query: int, candidate: int) -> float:
        q, c = self._check(query), self._check(candidate)
        return self._scores.get((q, c), self._scores.get((c, q), 0.0))

    def multi_frame_pointmaps(self, frame_ids: Sequence[int]) -> list[Pointmap]:
        ids = [self._check(i) for i in frame_ids]
        if len(ids) < 2:
            raise ValueError("multi-frame inference needs at least two frames")
        out = []
        for i in ids:
            try:
                out.append(read_pointmap(self.root / world_pointmap_filename(i), GaugePointmap))
            except ProviderError as e:
                raise ProviderError(f"frame {i}: {e}") from e
        return out

    def focal_estimate(self, frame: Frame) -> float:
        i = self._check(frame.id)
        path = self.root / focal_filename(i)
        try:
            return float(path.read_text().split()[0])
        except (OSError, IndexError, ValueError) as e:
            raise ProviderError(f"frame {i}: missing or unreadable focal sidecar {path.name}") from e

    def ground_truth(self) -> dict[int, Sim3Transform] | None:
        path = self.root / "groundtruth.txt"
        if not path.is_file():
            return None
        try:
            gt = read_tum(path)
        except TrajectoryError as e:
            raise ProviderError(f"groundtruth.txt: {e}") from e
        ids = self.frame_ids()
        stamps = [self._entries[i][0] for i in ids]
        return {ids[i]: gt.poses[j] for i, j in associate(stamps, gt.timestamps)}


def export_dataset(provider: PointmapProvider, root, pairs: Sequence[tuple[int, int]] | None = None,
                   min_score: float = 0.0, with_intrinsics: bool = True) -> Path:
    """Write ``provider``'s outputs in the layout read by :class:`FilesProvider`.

    Correspondences are written for ``pairs`` or, by default, for every unordered pair
    whose retrieval score exceeds ``min_score``. Images are quantised to 8-bit PNG.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = provider.frame_ids()
    lines = []
    K = None
    for i in ids:
        fr = provider.frame(i)
        name = f"frame_{i:06}.png"
        Image.fromarray(np.round(np.clip(fr.image, 0, 1) * 255).astype(np.uint8)).save(root / name)
        lines.append(f"{i} {fr.timestamp!r} {name}")
        write_pointmap(root / pointmap_filename(i), provider.pointmap(i))
        (root / focal_filename(i)).write_text(f"{provider.focal_estimate(fr)!r}\n")
        K = K or fr.intrinsics
    (root / "frames.txt").write_text("\n".join(lines) + "\n")
    if with_intrinsics and K is not None:
        (root / "intrinsics.txt").write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n")
    if len(ids) >= 2:
        for i, pm in zip(ids, provider.multi_frame_pointmaps(ids)):
            write_pointmap(root / world_pointmap_filename(i), pm)
    scores = []
    for a, b in itertools.combinations(ids, 2):
        s = float(provider.retrieval_score(b, a))
        if s > 0:
            scores.append(f"{b} {a} {s!r}")
    (root / "retrieval.txt").write_text("\n".join(scores) + ("\n" if scores else ""))
    if pairs is None:
        pairs = [(b, a) for a, b in itertools.combinations(ids, 2)
                 if provider.retrieval_score(b, a) > min_score]
    for c, k in pairs:
        _, _, corrs = provider.match(provider.frame(c), provider.frame(k))
        write_correspondences(root / correspondence_filename(c, k), corrs)
    gt = provider.ground_truth()
    if gt:
        stamps = [provider.frame(i).timestamp for i in ids if i in gt]
        write_tum(root / "groundtruth.txt", Trajectory(np.array(stamps), [gt[i] for i in ids if i in gt]))
    return root
