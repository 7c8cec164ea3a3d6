"""Warm start: forward projection of the previous frame's flow and fusion of
the projected and motion-vector priors under a shared attention map.

Forward warping splats each source pixel's flow to its target location with
bilinear weights; holes stay empty (mask 0) and overlaps are resolved by
weight-normalized averaging.  A two-headed credibility block scores both
priors and the aggregation of the converting module runs with both value
sources.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .mvcm import WINDOW_EPS, add_stack_params, apply_stack, conv_specs_ceb

WARP_WEIGHT_TAU = 0.25


def forward_warp(f_pre):
    """Project a flow field to the next frame by splatting.

    f_pre: (H,W,2) numpy flow in pixels.  Returns (f_prj (H,W,2), m_prj (H,W)),
    both float32: value = weight-normalized splat accumulation where the
    accumulated weight exceeds tau, else 0; mask = min(weight, 1) there.
    """
    dt = np.float64 if np.asarray(f_pre).dtype == np.float64 else np.float32
    f_pre = np.asarray(f_pre, dtype=dt)
    if f_pre.ndim != 3 or f_pre.shape[2] != 2:
        raise ValueError(f"forward_warp: expected (H,W,2), got {f_pre.shape}")
    if not np.isfinite(f_pre).all():
        raise ValueError("forward_warp: non-finite flow")
    h, w = f_pre.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(dt)
    tx = (gx + f_pre[..., 0]).reshape(-1)
    ty = (gy + f_pre[..., 1]).reshape(-1)
    acc, wacc = kernels.bilinear_splat(f_pre.reshape(-1, 2), tx, ty, h, w)
    covered = wacc > WARP_WEIGHT_TAU
    f_prj = np.zeros((h, w, 2), dtype=dt)
    f_prj[covered, 0] = acc[0][covered] / wacc[covered]
    f_prj[covered, 1] = acc[1][covered] / wacc[covered]
    m_prj = np.where(covered, np.minimum(wacc, 1.0), 0.0).astype(dt)
    return f_prj, m_prj


def add_warmstart_params(params, rng):
    add_stack_params(params, "ceb2", conv_specs_ceb(5, 2), rng, final_scale=0.1)


def estimate_credibility2(i1, m_mv, m_prj, params):
    """Two-headed credibility block for the fused warm start.

    i1: Tensor (3,H,W); m_mv, m_prj: Tensor (1,H,W).  Returns
    (c_prj, c_mv), each Tensor (H,W): channel 0 scores the projected flow,
    channel 1 the motion-vector prior.
    """
    hw = i1.data.shape[1:]
    if m_mv.data.shape != (1,) + hw or m_prj.data.shape != (1,) + hw:
        raise ValueError("estimate_credibility2: mask shapes do not match the frame")
    x = ad.concat_channels([i1, m_mv, m_prj])
    c = apply_stack(x, params, "ceb2", conv_specs_ceb(5, 2))
    c_prj = ad.squeeze0(ad.slice_channels(c, 0, 1))
    c_mv = ad.squeeze0(ad.slice_channels(c, 1, 2))
    return c_prj, c_mv


def fused_aggregate(q, k, v_mv, v_prj, c_mv, c_prj, d):
    """Two-source credibility-weighted window aggregation (Tensor in/out)."""
    return ad.window_fused_aggregate(q, k, v_mv, c_mv, v_prj, c_prj, d=d, eps=WINDOW_EPS)
