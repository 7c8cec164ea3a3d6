"""Synthetic paired samples: textured translating background plus moving
textured rectangles, with block motion vectors derived from the ground truth.

Everything is generated analytically from smooth procedural textures, so both
frames, the dense ground-truth flow, the occlusion-aware validity mask and
the block-level motion-vector sidecar are mutually consistent.  A previous-
frame flow (constant-velocity assumption) is included for warm-start tests.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from .errors import DataError
from .flo import read_flo, write_flo
from .mvdata import MotionVectorRecord, MvSidecar, rasterize, read_sidecar, write_sidecar


@dataclass
class SynthConfig:
    size: int = 64
    block_size: int = 8
    n_moving_objects: int = 2
    mv_noise: float = 1.0
    mv_outlier_frac: float = 0.1  # blocks whose match ignores the true motion
    coverage: float = 0.85
    photometric_noise: float = 0.01
    max_bg_shift: float = 5.0
    max_obj_shift: float = 9.0
    texture_cell: int = 5
    qp: int = 27
    bg_shift: tuple | None = None  # pin the background translation (tests)

    def validate(self):
        if self.size <= 0 or self.block_size <= 0 or self.size % self.block_size:
            raise ValueError(f"size {self.size} must be a positive multiple of block_size {self.block_size}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage {self.coverage} outside [0,1]")
        if not 0.0 <= self.mv_outlier_frac <= 1.0:
            raise ValueError(f"mv_outlier_frac {self.mv_outlier_frac} outside [0,1]")
        if self.mv_noise < 0 or self.photometric_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.n_moving_objects < 0:
            raise ValueError("n_moving_objects must be >= 0")


@dataclass
class Sample:
    """One training/eval pair: frames in [0,1], flows in pixels."""

    i1: np.ndarray  # (H,W,3) float32
    i2: np.ndarray  # (H,W,3) float32
    f_mv: np.ndarray  # (H,W,2) float32
    m_mv: np.ndarray  # (H,W)   float32
    f_gt: np.ndarray  # (H,W,2) float32
    valid: np.ndarray  # (H,W)  float32
    f_pre: np.ndarray | None = None  # (H,W,2) float32
    sidecar: MvSidecar | None = None


class _Texture:
    """Smooth random texture: bilinear interpolation of a coarse lattice,
    evaluable at arbitrary continuous coordinates (clamped)."""

    def __init__(self, rng, h, w, cell):
        self.cell = float(cell)
        gh = int(np.ceil(h / cell)) + 2
        gw = int(np.ceil(w / cell)) + 2
        self.grid = rng.random((gh, gw, 3)).astype(np.float32)

    def at(self, xs, ys):
        g = self.grid
        gx = np.clip(xs / self.cell, 0.0, g.shape[1] - 1.001)
        gy = np.clip(ys / self.cell, 0.0, g.shape[0] - 1.001)
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        fx = (gx - x0)[..., None]
        fy = (gy - y0)[..., None]
        top = g[y0, x0] * (1 - fx) + g[y0, x0 + 1] * fx
        bot = g[y0 + 1, x0] * (1 - fx) + g[y0 + 1, x0 + 1] * fx
        return (top * (1 - fy) + bot * fy).astype(np.float32)


def _layer_map(size, rects):
    """Index of the topmost rectangle covering each pixel; -1 for background.
    rects: list of (x0, y0, w, h) in float pixels."""
    gy, gx = np.mgrid[0:size, 0:size]
    owner = np.full((size, size), -1, dtype=np.int32)
    for i, (x0, y0, w, h) in enumerate(rects):
        inside = (gx >= x0) & (gx < x0 + w) & (gy >= y0) & (gy < y0 + h)
        owner[inside] = i
    return owner


def synth_sample(seed, config=None):
    """Generate one deterministic Sample from a seed."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.size
    gy, gx = np.mgrid[0:n, 0:n].astype(np.float32)

    # scene: background translation + per-object translations (frame1 -> frame2)
    t_bg = rng.uniform(-cfg.max_bg_shift, cfg.max_bg_shift, size=2).astype(np.float32)
    if cfg.bg_shift is not None:
        t_bg = np.asarray(cfg.bg_shift, dtype=np.float32)
    bg_tex = _Texture(rng, n + 4 * int(cfg.max_bg_shift) + 8, n + 4 * int(cfg.max_bg_shift) + 8, cfg.texture_cell)
    pad = 2.0 * cfg.max_bg_shift + 2.0  # keep background samples off the lattice edge

    rects1 = []
    shifts = []
    textures = []
    for _ in range(cfg.n_moving_objects):
        w = float(rng.integers(n // 5, n // 2))
        h = float(rng.integers(n // 5, n // 2))
        x0 = float(rng.uniform(0, n - w))
        y0 = float(rng.uniform(0, n - h))
        t = rng.uniform(-cfg.max_obj_shift, cfg.max_obj_shift, size=2).astype(np.float32)
        rects1.append((x0, y0, w, h))
        shifts.append(t)
        textures.append(_Texture(rng, int(h) + 2, int(w) + 2, max(2, cfg.texture_cell - 1)))

    rects2 = [(x0 + t[0], y0 + t[1], w, h) for (x0, y0, w, h), t in zip(rects1, shifts)]
    rects0 = [(x0 - t[0], y0 - t[1], w, h) for (x0, y0, w, h), t in zip(rects1, shifts)]

    owner1 = _layer_map(n, rects1)
    owner0 = _layer_map(n, rects0)

    # frame 1 / frame 2 composited from the same layer textures
    i1 = bg_tex.at(gx + pad, gy + pad)
    i2 = bg_tex.at(gx + pad - t_bg[0], gy + pad - t_bg[1])
    for i, ((x1r, y1r, _, _), (x2r, y2r, _, _), t) in enumerate(zip(rects1, rects2, shifts)):
        m1 = owner1 == i
        i1[m1] = textures[i].at(gx[m1] - x1r, gy[m1] - y1r)
        gy2, gx2 = np.mgrid[0:n, 0:n]
        m2 = (gx2 >= x2r) & (gx2 < x2r + rects1[i][2]) & (gy2 >= y2r) & (gy2 < y2r + rects1[i][3])
        # higher-index objects overwrite in frame 2 as well
        i2[m2] = textures[i].at(gx[m2] - x2r, gy[m2] - y2r)

    # dense ground truth and constant-velocity previous flow
    f_gt = np.empty((n, n, 2), dtype=np.float32)
    f_gt[..., 0] = t_bg[0]
    f_gt[..., 1] = t_bg[1]
    for i, t in enumerate(shifts):
        f_gt[owner1 == i] = t
    f_pre = np.empty_like(f_gt)
    f_pre[..., 0] = t_bg[0]
    f_pre[..., 1] = t_bg[1]
    for i, t in enumerate(shifts):
        f_pre[owner0 == i] = t

    # occlusion-aware validity: the surface seen at p in frame 1 must still be
    # the topmost surface at p + F(p) in frame 2
    tx = gx + f_gt[..., 0]
    ty = gy + f_gt[..., 1]
    inb = (tx >= 0) & (tx <= n - 1) & (ty >= 0) & (ty <= n - 1)
    owner2_at_target = np.full((n, n), -1, dtype=np.int32)
    for i, (x0, y0, w, h) in enumerate(rects2):
        hit = (tx >= x0) & (tx < x0 + w) & (ty >= y0) & (ty < y0 + h)
        owner2_at_target[hit] = i
    valid = (inb & (owner2_at_target == owner1)).astype(np.float32)

    if cfg.photometric_noise > 0:
        i2 = i2 + rng.normal(0.0, cfg.photometric_noise, size=i2.shape).astype(np.float32)
    i1 = np.clip(i1, 0.0, 1.0)
    i2 = np.clip(i2, 0.0, 1.0)

    # block motion vectors: per-block median of the ground truth, quarter-pel
    bs = cfg.block_size
    nb = n // bs
    records = []
    med = f_gt.reshape(nb, bs, nb, bs, 2).transpose(0, 2, 1, 3, 4).reshape(nb, nb, bs * bs, 2)
    med = np.median(med, axis=2)
    if cfg.mv_noise > 0:
        med = med + rng.normal(0.0, cfg.mv_noise, size=med.shape)
    if cfg.mv_outlier_frac > 0:
        n_out = int(round(cfg.mv_outlier_frac * nb * nb))
        if n_out:
            which = rng.choice(nb * nb, size=n_out, replace=False)
            bad = rng.uniform(-cfg.max_obj_shift, cfg.max_obj_shift, size=(n_out, 2))
            med.reshape(-1, 2)[which] = bad
    keep = np.ones(nb * nb, dtype=bool)
    n_drop = int(round((1.0 - cfg.coverage) * nb * nb))
    if n_drop:
        keep[rng.choice(nb * nb, size=n_drop, replace=False)] = False
    keep = keep.reshape(nb, nb)
    for by in range(nb):
        for bx in range(nb):
            if not keep[by, bx]:
                continue
            records.append(
                MotionVectorRecord(
                    block_x=bx * bs,
                    block_y=by * bs,
                    block_w=bs,
                    block_h=bs,
                    mv_dx=int(np.rint(med[by, bx, 0] * 4)),
                    mv_dy=int(np.rint(med[by, bx, 1] * 4)),
                    mv_scale=4,
                )
            )
    sidecar = MvSidecar(frame_index=0, frame_w=n, frame_h=n, codec="synth", qp=cfg.qp, records=records)
    f_mv, m_mv = rasterize(sidecar)

    return Sample(i1=i1, i2=i2, f_mv=f_mv, m_mv=m_mv, f_gt=f_gt, valid=valid, f_pre=f_pre, sidecar=sidecar)


# ---------------------------------------------------------------------------
# on-disk dataset layout (consumed by the CLI estimate/eval/train paths)


def save_image(img, path):
    """Save an (H,W,3) float image in [0,1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_mask(mask, path):
    arr = np.clip(np.asarray(mask) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return arr


def write_sample(sample, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_image(sample.i1, os.path.join(out_dir, "frame1.png"))
    save_image(sample.i2, os.path.join(out_dir, "frame2.png"))
    write_flo(sample.f_gt, os.path.join(out_dir, "gt.flo"))
    save_mask(sample.valid, os.path.join(out_dir, "valid.png"))
    if sample.sidecar is not None:
        write_sidecar(sample.sidecar, os.path.join(out_dir, "mv.mvs"))
    if sample.f_pre is not None:
        write_flo(sample.f_pre, os.path.join(out_dir, "prev.flo"))


def load_sample(sample_dir):
    """Load a sample directory; gt/valid/prev are optional."""
    p = lambda name: os.path.join(sample_dir, name)
    if not os.path.exists(p("frame1.png")) or not os.path.exists(p("frame2.png")):
        raise DataError(f"{sample_dir}: missing frame1.png/frame2.png")
    if not os.path.exists(p("mv.mvs")):
        raise DataError(f"{sample_dir}: missing mv.mvs sidecar")
    i1 = load_image(p("frame1.png"))
    i2 = load_image(p("frame2.png"))
    sidecar = read_sidecar(p("mv.mvs"))
    if (sidecar.frame_h, sidecar.frame_w) != i1.shape[:2]:
        raise DataError(f"{sample_dir}: sidecar frame size does not match frame1.png")
    f_mv, m_mv = rasterize(sidecar)
    f_gt = read_flo(p("gt.flo")) if os.path.exists(p("gt.flo")) else None
    valid = load_mask(p("valid.png")) if os.path.exists(p("valid.png")) else None
    if f_gt is not None and valid is None:
        valid = np.ones(f_gt.shape[:2], dtype=np.float32)
    f_pre = read_flo(p("prev.flo")) if os.path.exists(p("prev.flo")) else None
    return Sample(i1=i1, i2=i2, f_mv=f_mv, m_mv=m_mv, f_gt=f_gt, valid=valid, f_pre=f_pre, sidecar=sidecar)


def write_dataset(out_dir, n_samples, seed, config=None):
    """Generate n_samples seeded samples under out_dir plus a manifest."""
    cfg = config or SynthConfig()
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(n_samples):
        name = f"sample_{i:05d}"
        write_sample(synth_sample(seed + i, cfg), os.path.join(out_dir, name))
        names.append(name)
    manifest = {
        "format": "mvprior-dataset/1",
        "n_samples": n_samples,
        "seed": seed,
        "config": asdict(cfg),
        "samples": names,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def list_dataset(data_dir):
    """Sample subdirectories of a dataset directory, manifest order if present."""
    mpath = os.path.join(data_dir, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        return [os.path.join(data_dir, s) for s in manifest["samples"]]
    subs = sorted(
        d for d in os.listdir(data_dir) if os.path.isdir(os.path.join(data_dir, d))
    )
    if not subs:
        raise DataError(f"{data_dir}: no sample directories found")
    return [os.path.join(data_dir, d) for d in subs]
