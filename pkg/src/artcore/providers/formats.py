"""On-disk formats: ADPM binary pointmaps and line-oriented correspondence files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .base import CorrespondenceSet, Pointmap, ProviderError

ADPM_MAGIC = b"ADPM"
ADPM_VERSION = 1
_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("conf", "<f4"), ("valid", "u1")])


def pointmap_filename(frame_id: int) -> str:
    return f"pointmap_{frame_id:06}.adpm"


def correspondence_filename(c: int, k: int) -> str:
    return f"corr_{c:06}_{k:06}.txt"


def encode_pointmap(pm: Pointmap) -> bytes:
    H, W = pm.shape
    rec = np.zeros(H * W, dtype=_RECORD)
    pts = np.where(pm.valid[..., None], pm.points, 0.0).reshape(-1, 3)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rec["conf"] = np.where(pm.valid, pm.raw_conf, 0.0).reshape(-1)
    rec["valid"] = pm.valid.reshape(-1)
    return ADPM_MAGIC + struct.pack("<III", ADPM_VERSION, H, W) + rec.tobytes()


def decode_pointmap(data: bytes, cls: type = Pointmap) -> Pointmap:
    if data[:4] != ADPM_MAGIC:
        raise ProviderError("not an ADPM pointmap")
    version, H, W = struct.unpack("<III", data[4:16])
    if version != ADPM_VERSION:
        raise ProviderError(f"unsupported ADPM version {version}")
    body = data[16:]
    if len(body) != H * W * _RECORD.itemsize:
        raise ProviderError("truncated ADPM pointmap")
    rec = np.frombuffer(body, dtype=_RECORD)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float).reshape(H, W, 3)
    return cls(pts, rec["valid"].astype(bool).reshape(H, W),
                    rec["conf"].astype(float).reshape(H, W))


def write_pointmap(path, pm: Pointmap) -> None:
    Path(path).write_bytes(encode_pointmap(pm))


def read_pointmap(path, cls: type = Pointmap) -> Pointmap:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ProviderError(f"cannot read pointmap {path}: {e}") from e
    return decode_pointmap(data, cls)


def write_correspondences(path, corrs: CorrespondenceSet) -> None:
    rows = np.hstack([corrs.pix_c, corrs.pix_k, corrs.P_c, corrs.P_k])
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_correspondences(path, c: int, k: int) -> CorrespondenceSet:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ProviderError(f"cannot read correspondences {path}: {e}") from e
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ProviderError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    a = np.array(rows, dtype=float).reshape(-1, 10)
    return CorrespondenceSet(c, k, a[:, 0:2], a[:, 2:4], a[:, 4:7], a[:, 7:10])
