"""Motion-vector sidecar format (mvsidecar/1), block rasterization and
mask-weighted flow pooling.

A sidecar file is line-delimited text: a version header line followed by one
JSON object per frame.  Motion offsets are stored as integers in sub-pixel
units (mv_scale is the denominator, 4 = quarter-pel) and point from the
current frame to the next (forward flow).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SIDECAR_VERSION = "mvsidecar/1"

_RECORD_FIELDS = ("block_x", "block_y", "block_w", "block_h", "mv_dx", "mv_dy", "mv_scale")
_FRAME_FIELDS = ("frame_index", "frame_w", "frame_h", "codec", "qp", "records")


@dataclass
class MotionVectorRecord:
    """One compressed block: top-left position, size, sub-pixel motion offset."""

    block_x: int
    block_y: int
    block_w: int
    block_h: int
    mv_dx: int
    mv_dy: int
    mv_scale: int

    def validate(self):
        if self.block_w <= 0 or self.block_h <= 0:
            raise DataError(f"record: non-positive block size {self.block_w}x{self.block_h}")
        if self.mv_scale not in (1, 2, 4):
            raise DataError(f"record: mv_scale must be 1, 2 or 4, got {self.mv_scale}")

    def flow(self):
        return self.mv_dx / self.mv_scale, self.mv_dy / self.mv_scale


@dataclass
class MvSidecar:
    """Per-frame motion-vector side data."""

    frame_index: int
    frame_w: int
    frame_h: int
    codec: str
    qp: int
    records: list = field(default_factory=list)

    def validate(self):
        if self.frame_w <= 0 or self.frame_h <= 0:
            raise DataError(f"sidecar: bad frame size {self.frame_w}x{self.frame_h}")
        if self.codec == "h264" and not 0 <= self.qp <= 51:
            raise DataError(f"sidecar: qp {self.qp} outside [0,51] for codec h264")
        for r in self.records:
            r.validate()


def write_sidecar(sidecars, path):
    """Write one sidecar or a list of them (one frame per line)."""
    if isinstance(sidecars, MvSidecar):
        sidecars = [sidecars]
    lines = [SIDECAR_VERSION]
    for sc in sidecars:
        sc.validate()
        obj = {
            "frame_index": sc.frame_index,
            "frame_w": sc.frame_w,
            "frame_h": sc.frame_h,
            "codec": sc.codec,
            "qp": sc.qp,
            "records": [
                {f: getattr(r, f) for f in _RECORD_FIELDS} for r in sc.records
            ],
        }
        lines.append(json.dumps(obj, separators=(",", ":"), sort_keys=True))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _parse_frame(obj, where):
    if not isinstance(obj, dict):
        raise DataError(f"{where}: frame entry is not an object")
    for key in _FRAME_FIELDS:
        if key not in obj:
            raise DataError(f"{where}: missing field '{key}'")
    records = []
    for i, rec in enumerate(obj["records"]):
        for key in _RECORD_FIELDS:
            if key not in rec:
                raise DataError(f"{where}: record {i}: missing field '{key}'")
        records.append(MotionVectorRecord(*(int(rec[k]) for k in _RECORD_FIELDS)))
    sc = MvSidecar(
        frame_index=int(obj["frame_index"]),
        frame_w=int(obj["frame_w"]),
        frame_h=int(obj["frame_h"]),
        codec=str(obj["codec"]),
        qp=int(obj["qp"]),
        records=records,
    )
    sc.validate()
    return sc


def read_sidecar_frames(path):
    """Read every frame entry of a sidecar file."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty sidecar file")
    if lines[0].strip() != SIDECAR_VERSION:
        raise DataError(
            f"{path}: version mismatch: expected '{SIDECAR_VERSION}', got '{lines[0].strip()}'"
        )
    frames = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{n}: malformed JSON: {e}") from e
        frames.append(_parse_frame(obj, f"{path}:{n}"))
    if not frames:
        raise DataError(f"{path}: no frame entries")
    return frames


def read_sidecar(path):
    """Read a single-frame sidecar file."""
    frames = read_sidecar_frames(path)
    if len(frames) != 1:
        raise DataError(f"{path}: expected a single frame, found {len(frames)}")
    return frames[0]


def rasterize(sidecar, clip=True):
    """Fill each block with its motion offset.

    Returns (flow (H,W,2) float32, mask (H,W) float32).  Later records
    overwrite earlier ones on overlap; uncovered pixels are flow 0, mask 0.
    With clip=False a record extending outside the frame raises DataError.
    """
    sidecar.validate()
    h, w = sidecar.frame_h, sidecar.frame_w
    flow = np.zeros((h, w, 2), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.float32)
    for i, r in enumerate(sidecar.records):
        x0, y0 = r.block_x, r.block_y
        x1, y1 = x0 + r.block_w, y0 + r.block_h
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            if not clip:
                raise DataError(
                    f"record {i}: block ({x0},{y0})+{r.block_w}x{r.block_h} outside "
                    f"{w}x{h} frame and clipping is disabled"
                )
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, w), min(y1, h)
            if x0 >= x1 or y0 >= y1:
                continue
        u, v = r.flow()
        flow[y0:y1, x0:x1, 0] = u
        flow[y0:y1, x0:x1, 1] = v
        mask[y0:y1, x0:x1] = 1.0
    return flow, mask


def downsample_flow(flow, mask, factor):
    """Mask-weighted average pooling of a flow field.

    Pooled displacements are divided by `factor` so they stay in pixels at the
    pooled resolution; the pooled mask is the mean of the mask in each cell.
    """
    dt = np.float64 if np.asarray(flow).dtype == np.float64 else np.float32
    flow = np.asarray(flow, dtype=dt)
    mask = np.asarray(mask, dtype=dt)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"downsample_flow: {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    mblk = mask.reshape(ho, factor, wo, factor)
    wsum = mblk.sum(axis=(1, 3))
    fblk = (flow * mask[..., None]).reshape(ho, factor, wo, factor, 2)
    fsum = fblk.sum(axis=(1, 3))
    out = np.zeros((ho, wo, 2), dtype=dt)
    nz = wsum > 0
    out[nz] = fsum[nz] / wsum[nz, None] / factor
    return out, (wsum / (factor * factor)).astype(dt)
