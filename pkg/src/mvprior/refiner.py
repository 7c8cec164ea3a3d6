"""Iterative flow refiner: strided feature extraction, local correlation at
the current flow, and a shared conv update block predicting flow increments.

Works at 1/R resolution (R=4) with flow stored in 1/R-pixel units; the final
prediction is bilinearly upsampled with displacement scaling.  Initialization
strategies cover zero, projected previous flow, the converted motion-vector
prior, raw block flow, and the fused warm start.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import mvcm as mvcm_mod
from . import warmstart as ws_mod
from .mvdata import downsample_flow

FEATURE_SCALE = 4
FEAT_DIM = 64
CORR_RADIUS = 3

STRATEGIES = ("zero", "warm_start", "mvcm", "raw_mv", "mvcm_warm_start")

_FEAT_SPECS = [
    {"cin": 3, "cout": 32, "k": 3, "stride": 2, "dilation": 1, "act": "relu"},
    {"cin": 32, "cout": 48, "k": 3, "stride": 1, "dilation": 1, "act": "relu"},
    {"cin": 48, "cout": FEAT_DIM, "k": 3, "stride": 2, "dilation": 1, "act": "relu"},
    {"cin": FEAT_DIM, "cout": FEAT_DIM, "k": 3, "stride": 1, "dilation": 1, "act": None},
]

_CTX_DIM = 48
_CTX_SPECS = [
    {"cin": 3, "cout": 32, "k": 3, "stride": 2, "dilation": 1, "act": "relu"},
    {"cin": 32, "cout": 48, "k": 3, "stride": 1, "dilation": 1, "act": "relu"},
    {"cin": 48, "cout": _CTX_DIM, "k": 3, "stride": 2, "dilation": 1, "act": "relu"},
]


def _upd_specs(corr_radius):
    cin = (2 * corr_radius + 1) ** 2 + 2 + _CTX_DIM
    return [
        {"cin": cin, "cout": 96, "k": 3, "stride": 1, "dilation": 1, "act": "relu"},
        {"cin": 96, "cout": 64, "k": 3, "stride": 1, "dilation": 1, "act": "relu"},
        {"cin": 64, "cout": 2, "k": 3, "stride": 1, "dilation": 1, "act": None},
    ]


def add_refiner_params(params, rng, corr_radius=CORR_RADIUS):
    mvcm_mod.add_stack_params(params, "feat", _FEAT_SPECS, rng)
    mvcm_mod.add_stack_params(params, "ctx", _CTX_SPECS, rng)
    # damped head so the first iterations start near the supplied init
    mvcm_mod.add_stack_params(params, "upd", _upd_specs(corr_radius), rng, final_scale=0.1)


def _work_dtype(arr):
    # float64 is preserved so the verification mode runs end to end
    return np.float64 if np.asarray(arr).dtype == np.float64 else np.float32


def chw(img):
    """(H,W,C) float image/flow -> contiguous (C,H,W), float64-preserving."""
    img = np.asarray(img)
    return np.ascontiguousarray(img.astype(_work_dtype(img), copy=False).transpose(2, 0, 1))


def hwc(arr):
    return np.ascontiguousarray(np.asarray(arr).transpose(1, 2, 0))


def pool_image(img, factor):
    """Mean-pool an (H,W,C) image by an integer factor."""
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ValueError(f"pool_image: {h}x{w} not divisible by {factor}")
    pooled = img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return pooled.astype(_work_dtype(img))


def extract_features(i, params, prefix="feat"):
    """Feature map at 1/R resolution; i: Tensor (3,H,W), dims divisible by R."""
    _, h, w = i.data.shape
    if h % FEATURE_SCALE or w % FEATURE_SCALE:
        raise ValueError(f"extract_features: {h}x{w} not divisible by {FEATURE_SCALE}")
    specs = _FEAT_SPECS if prefix == "feat" else _CTX_SPECS
    return mvcm_mod.apply_stack(i, params, prefix, specs)


def local_correlation(f1, f2, flow, radius):
    """Local correlation volume; thin wrapper over the autodiff op."""
    return ad.local_correlation(f1, f2, flow, radius)


def iterate(sample, init, n_iters, params, corr_radius=CORR_RADIUS):
    """Run the refiner from `init` ((2,h,w) Tensor or array, 1/R units).

    Returns (flows, final): `flows` is the list of per-iteration Tensors at
    1/R scale (length n_iters) and `final` the upsampled full-resolution flow.
    """
    if n_iters < 0:
        raise ValueError("iterate: n_iters must be >= 0")
    i1 = ad.Tensor(chw(sample.i1))
    i2 = ad.Tensor(chw(sample.i2))
    f1 = extract_features(i1, params, "feat")
    f2 = extract_features(i2, params, "feat")
    ctx = extract_features(i1, params, "ctx")
    flow = init if isinstance(init, ad.Tensor) else ad.Tensor(np.asarray(init, dtype=f1.dtype))
    if flow.data.shape != (2,) + f1.data.shape[1:]:
        raise ValueError(f"iterate: init shape {flow.data.shape} != (2,{f1.data.shape[1]},{f1.data.shape[2]})")
    flows = []
    specs = _upd_specs(corr_radius)
    for _ in range(n_iters):
        corr = local_correlation(f1, f2, flow, corr_radius)
        x = ad.concat_channels([corr, flow, ctx])
        dflow = mvcm_mod.apply_stack(x, params, "upd", specs)
        flow = ad.add(flow, dflow)
        flows.append(flow)
    final = ad.upsample_flow(flow, FEATURE_SCALE)
    return flows, final


def make_init(sample, strategy, params, window_radius, mvcm_resolution="feature"):
    """Build the 1/R-scale initial flow for a strategy.

    Returns a Tensor (2, H/R, W/R) in 1/R-pixel units; the mvcm strategies
    stay differentiable so training reaches the converting module.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"make_init: unknown strategy {strategy!r} (choose from {STRATEGIES})")
    h, w = sample.i1.shape[:2]
    r = FEATURE_SCALE
    dt = _work_dtype(sample.i1)
    if strategy == "zero":
        return ad.Tensor(np.zeros((2, h // r, w // r), dtype=dt))
    if strategy in ("warm_start", "mvcm_warm_start") and sample.f_pre is None:
        raise ValueError(f"make_init: strategy {strategy!r} requires a previous-frame flow (f_pre)")
    if strategy in ("mvcm", "raw_mv", "mvcm_warm_start") and sample.f_mv is None:
        raise ValueError(f"make_init: strategy {strategy!r} requires motion vectors (f_mv)")

    if strategy == "warm_start":
        f_prj, m_prj = ws_mod.forward_warp(sample.f_pre)
        flow_lo, _ = downsample_flow(f_prj, m_prj, r)
        return ad.Tensor(chw(flow_lo))
    if strategy == "raw_mv":
        flow_lo, _ = downsample_flow(sample.f_mv, sample.m_mv, r)
        return ad.Tensor(chw(flow_lo))

    # converted prior (optionally fused with the projected previous flow)
    if mvcm_resolution == "feature":
        i1 = ad.Tensor(chw(pool_image(sample.i1, r)))
        fmv, mmv = downsample_flow(sample.f_mv, sample.m_mv, r)
        scale_back = 1.0
    elif mvcm_resolution == "full":
        i1 = ad.Tensor(chw(sample.i1))
        fmv, mmv = sample.f_mv, sample.m_mv
        scale_back = 1.0 / r
    else:
        raise ValueError(f"make_init: bad mvcm_resolution {mvcm_resolution!r}")
    v_mv = ad.Tensor(chw(fmv))
    m_mv = ad.Tensor(np.ascontiguousarray(mmv[None].astype(dt)))

    if strategy == "mvcm":
        out = mvcm_mod.mvcm_forward(i1, v_mv, m_mv, params, window_radius)
    else:
        f_prj, m_prj = ws_mod.forward_warp(sample.f_pre)
        if mvcm_resolution == "feature":
            fprj, mprj = downsample_flow(f_prj, m_prj, r)
        else:
            fprj, mprj = f_prj, m_prj
        q, k = mvcm_mod.encode_qk(i1, params)
        c_prj, c_mv = ws_mod.estimate_credibility2(
            i1, m_mv, ad.Tensor(np.ascontiguousarray(mprj[None].astype(dt))), params
        )
        out = ws_mod.fused_aggregate(q, k, v_mv, ad.Tensor(chw(fprj)), c_mv, c_prj, window_radius)
    if mvcm_resolution == "full":
        out = ad.scale(ad.avg_pool2d(out, r), scale_back)
    return out
