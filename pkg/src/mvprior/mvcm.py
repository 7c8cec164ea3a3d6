"""Motion-vector converting module: context encoders, credibility estimation
and credibility-weighted local window attention over the block-flow prior.

Two six-layer conv encoders map the first frame to query/key maps; a
credibility block scores the motion prior per pixel from the frame and the
coverage mask; the aggregation replaces each pixel's motion by a convex
combination of the prior inside a (2d+1)^2 window.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

QK_DIM = 64
ENC_WIDTHS = [32, 32, 64, 64, QK_DIM, QK_DIM]
CEB_WIDTH = 32
CEB_DILATIONS = [1, 2, 4, 8, 4, 2]
WINDOW_EPS = 1e-8


def conv_specs_encoder(cin):
    """Six stride-1 3x3 convs, ReLU after each."""
    specs = []
    c = cin
    for w in ENC_WIDTHS:
        specs.append({"cin": c, "cout": w, "k": 3, "stride": 1, "dilation": 1, "act": "relu"})
        c = w
    return specs


def conv_specs_ceb(cin, out_channels):
    """Six plain 3x3 convs then six dilated ones (1,2,4,8,4,2); ReLU between,
    sigmoid last."""
    specs = []
    c = cin
    for _ in range(6):
        specs.append({"cin": c, "cout": CEB_WIDTH, "k": 3, "stride": 1, "dilation": 1, "act": "relu"})
        c = CEB_WIDTH
    for i, dil in enumerate(CEB_DILATIONS):
        last = i == len(CEB_DILATIONS) - 1
        specs.append(
            {
                "cin": c,
                "cout": out_channels if last else CEB_WIDTH,
                "k": 3,
                "stride": 1,
                "dilation": dil,
                "act": "sigmoid" if last else "relu",
            }
        )
        c = specs[-1]["cout"]
    return specs


def receptive_radius(specs):
    """Receptive-field radius of a stride-1 conv stack."""
    return sum(s["dilation"] * (s["k"] - 1) // 2 for s in specs)


def add_stack_params(params, prefix, specs, rng, final_scale=1.0):
    """He-initialized weights, zero biases; the last layer may be damped."""
    for i, sp in enumerate(specs):
        fan_in = sp["cin"] * sp["k"] * sp["k"]
        std = np.sqrt(2.0 / fan_in)
        if i == len(specs) - 1:
            std *= final_scale
        w = rng.normal(0.0, std, size=(sp["cout"], sp["cin"], sp["k"], sp["k"]))
        params.add(f"{prefix}.conv{i}.w", w.astype(np.float32))
        params.add(f"{prefix}.conv{i}.b", np.zeros(sp["cout"], dtype=np.float32))


def apply_stack(x, params, prefix, specs):
    for i, sp in enumerate(specs):
        x = ad.conv2d(
            x,
            params[f"{prefix}.conv{i}.w"],
            params[f"{prefix}.conv{i}.b"],
            stride=sp["stride"],
            dilation=sp["dilation"],
        )
        if sp["act"]:
            x = ad.activate(x, sp["act"])
    return x


def add_mvcm_params(params, rng):
    add_stack_params(params, "enc_a", conv_specs_encoder(3), rng)
    add_stack_params(params, "enc_b", conv_specs_encoder(3), rng)
    add_stack_params(params, "ceb", conv_specs_ceb(4, 1), rng, final_scale=0.1)


def encode_qk(i1, params):
    """Query/key context maps of the first frame; i1: Tensor (3,H,W)."""
    if i1.data.shape[0] != 3:
        raise ValueError(f"encode_qk: expected 3-channel input, got {i1.data.shape}")
    q = apply_stack(i1, params, "enc_a", conv_specs_encoder(3))
    k = apply_stack(i1, params, "enc_b", conv_specs_encoder(3))
    return q, k


def estimate_credibility(i1, m_mv, params):
    """Per-pixel credibility of the motion prior in (0,1).

    i1: Tensor (3,H,W); m_mv: Tensor (1,H,W).  Returns Tensor (1,H,W).
    """
    if m_mv.data.shape != (1,) + i1.data.shape[1:]:
        raise ValueError(
            f"estimate_credibility: mask shape {m_mv.data.shape} does not match frame {i1.data.shape}"
        )
    x = ad.concat_channels([i1, m_mv])
    return apply_stack(x, params, "ceb", conv_specs_ceb(4, 1))


def window_aggregate(q, k, v, c, d):
    """Single-source credibility-weighted window aggregation (Tensor in/out).

    v: Tensor (2,H,W) motion prior; c: Tensor (1,H,W) or (H,W) credibility.
    """
    cred = ad.squeeze0(c) if c.data.ndim == 3 else c
    return ad.window_fused_aggregate(q, k, v, cred, d=d, eps=WINDOW_EPS)


def mvcm_forward(i1, f_mv, m_mv, params, d):
    """Convert a rasterized block-flow prior into a smooth coarse flow.

    i1: Tensor (3,H,W); f_mv: Tensor (2,H,W); m_mv: Tensor (1,H,W).
    Returns Tensor (2,H,W) at the same resolution/units as f_mv.
    """
    q, k = encode_qk(i1, params)
    cred = estimate_credibility(i1, m_mv, params)
    out = window_aggregate(q, k, f_mv, cred, d)
    wsum = float(np.mean(cred.data))
    if wsum < 1e-6:
        log.warning("mvcm_forward: near-zero credibility everywhere (mean %.2e); output is low-confidence", wsum)
    return out
