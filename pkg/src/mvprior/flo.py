"""Middlebury .flo reader/writer.

Layout: float32 magic 202021.25, little-endian int32 width and height, then
row-major interleaved float32 (u, v) pairs.  Round-trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

FLO_MAGIC = 202021.25


def write_flo(flow, path):
    """Write an (H,W,2) float32 flow field."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"write_flo: expected (H,W,2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path):
    """Read a .flo file into an (H,W,2) float32 array."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise DataError(f"{path}: not a .flo file (bad magic)")
        dims = np.fromfile(f, "<i4", count=2)
        if dims.size != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise DataError(f"{path}: corrupt .flo header")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, "<f4", count=2 * w * h)
        if data.size != 2 * w * h:
            raise DataError(
                f"{path}: truncated .flo payload ({data.size // 2} of {w * h} pairs)"
            )
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after .flo payload")
    return data.reshape(h, w, 2)
