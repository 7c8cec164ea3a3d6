"""Flow accuracy metrics and visualization.

AEPE is the mean Euclidean endpoint error over valid pixels; the outlier rate
follows the KITTI rule (error above 3 px and above 5% of the ground-truth
magnitude).  Flows render as HSV images with hue = motion angle and
saturation = magnitude / max; error maps render as grayscale with invalid
pixels black.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

OUTLIER_ABS_PX = 3.0
OUTLIER_REL = 0.05


def _check_shapes(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError(f"flow shapes must match and be (H,W,2): {pred.shape} vs {gt.shape}")
    if valid.shape != pred.shape[:2]:
        raise ValueError(f"valid mask shape {valid.shape} != {pred.shape[:2]}")
    if valid.sum() <= 0:
        raise ValueError("empty valid mask")
    return pred, gt, valid


def endpoint_error(pred, gt):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt((d * d).sum(axis=2))


def aepe(pred, gt, valid):
    """Average endpoint error over valid pixels."""
    pred, gt, valid = _check_shapes(pred, gt, valid)
    epe = endpoint_error(pred, gt)
    return float((epe * valid).sum() / valid.sum())


def f1_outlier(pred, gt, valid):
    """Fraction of valid pixels with EPE > 3 px and EPE > 5% of |gt|."""
    pred, gt, valid = _check_shapes(pred, gt, valid)
    epe = endpoint_error(pred, gt)
    mag = np.sqrt((np.asarray(gt, dtype=np.float64) ** 2).sum(axis=2))
    outlier = (epe > OUTLIER_ABS_PX) & (epe > OUTLIER_REL * mag)
    return float((outlier * valid).sum() / valid.sum())


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, all components in [0,1]."""
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_hue(u, v):
    """Hue in [0,1): the motion angle, u rightward, v downward."""
    return (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0


def render_flow(flow, max_mag=None):
    """Color-wheel rendering of a flow field; returns (H,W,3) uint8."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.sqrt(u * u + v * v)
    if max_mag is None:
        max_mag = mag.max()
    sat = mag / max_mag if max_mag > 0 else np.zeros_like(mag)
    rgb = _hsv_to_rgb(flow_hue(u, v), np.clip(sat, 0.0, 1.0), np.ones_like(sat))
    return np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)


def render_error_map(pred, gt, valid):
    """Grayscale endpoint-error map, invalid pixels black; (H,W) uint8."""
    pred, gt, valid = _check_shapes(pred, gt, valid)
    epe = endpoint_error(pred, gt)
    vmask = valid > 0
    emax = epe[vmask].max() if vmask.any() else 0.0
    gray = epe / emax if emax > 0 else np.zeros_like(epe)
    gray = np.where(vmask, gray, 0.0)
    return np.clip(gray * 255.0 + 0.5, 0, 255).astype(np.uint8)


def save_png(arr, path):
    """Save a uint8 (H,W) or (H,W,3) array as PNG."""
    Image.fromarray(arr).save(path)
