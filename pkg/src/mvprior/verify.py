"""Gradient verification suite over every trainable block and the end-to-end
pipeline, run in the engine's 64-bit mode on small inputs.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import mvcm, refiner, trainloop, warmstart
from .config import ModelConfig
from .gradcheck import grad_check
from .synth import SynthConfig, synth_sample


def _f64_sample(seed, size=8):
    cfg = SynthConfig(size=size, block_size=4, n_moving_objects=1, max_bg_shift=1.5, max_obj_shift=2.0)
    s = synth_sample(seed, cfg)
    for f in dataclasses.fields(s):
        v = getattr(s, f.name)
        if isinstance(v, np.ndarray):
            setattr(s, f.name, v.astype(np.float64))
    return s


def _subset(params, prefixes):
    out = ad.ParamSet()
    for name, t in params.items():
        if any(name.startswith(p) for p in prefixes):
            out.add(name, t.data)
    return out


def gradient_suite(tolerance=1e-6, seed=0, max_elems=6, progress=None):
    """Run grad_check over each block plus the 2-iteration pipeline.

    Returns a list of (name, GradCheckReport).  Inputs are 8x8, parameters
    float64 copies of a seeded initialization.
    """
    mc = ModelConfig()
    rng = np.random.default_rng(seed)
    base = trainloop.build_params(mc, seed=seed).astype(np.float64)
    s = _f64_sample(seed + 1)
    results = []

    def run(name, params, closure):
        if progress:
            progress(name)
        results.append((name, grad_check(closure, params, tolerance, max_elems=max_elems, seed=seed)))

    i1 = ad.Tensor(refiner.chw(s.i1))
    m_mv = ad.Tensor(np.ascontiguousarray(s.m_mv[None]))
    v_mv = ad.Tensor(refiner.chw(s.f_mv))
    tgt = rng.normal(size=(2,) + s.i1.shape[:2])

    p_enc = _subset(base, ("enc_a.", "enc_b."))
    run("encoders_qk", p_enc, lambda: ad.tmean(ad.square(ad.add(*mvcm.encode_qk(i1, p_enc)))))

    p_ceb = _subset(base, ("ceb.",))
    run(
        "credibility_block",
        p_ceb,
        lambda: ad.tmean(ad.square(mvcm.estimate_credibility(i1, m_mv, p_ceb))),
    )

    # aggregation kernels with Q/K/V/C as the checked leaves
    p_win = ad.ParamSet()
    qw = p_win.add("q", rng.normal(size=(8, 6, 6)))
    kw = p_win.add("k", rng.normal(size=(8, 6, 6)))
    vw = p_win.add("v", rng.normal(size=(2, 6, 6)) * 3)
    cw = p_win.add("c", rng.random((6, 6)) * 0.9 + 0.05)
    run(
        "window_aggregate",
        p_win,
        lambda: ad.tmean(ad.square(mvcm.window_aggregate(qw, kw, vw, cw, d=2))),
    )

    p_fused = ad.ParamSet()
    qf = p_fused.add("q", rng.normal(size=(8, 6, 6)))
    kf = p_fused.add("k", rng.normal(size=(8, 6, 6)))
    vmf = p_fused.add("v_mv", rng.normal(size=(2, 6, 6)) * 3)
    cmf = p_fused.add("c_mv", rng.random((6, 6)) * 0.9 + 0.05)
    vpf = p_fused.add("v_prj", rng.normal(size=(2, 6, 6)) * 3)
    cpf = p_fused.add("c_prj", rng.random((6, 6)) * 0.9 + 0.05)
    run(
        "fused_aggregate",
        p_fused,
        lambda: ad.tmean(ad.square(warmstart.fused_aggregate(qf, kf, vmf, vpf, cmf, cpf, d=2))),
    )

    p_ceb2 = _subset(base, ("ceb2.",))
    m_prj = ad.Tensor(np.ascontiguousarray((rng.random(s.i1.shape[:2]))[None]))

    def ceb2_closure():
        c_prj, c_mv = warmstart.estimate_credibility2(i1, m_mv, m_prj, p_ceb2)
        return ad.tmean(ad.square(ad.add(c_prj, c_mv)))

    run("credibility_block_fused", p_ceb2, ceb2_closure)

    p_feat = _subset(base, ("feat.", "ctx."))
    run(
        "feature_context_encoders",
        p_feat,
        lambda: ad.tmean(
            ad.square(
                ad.concat_channels(
                    [
                        refiner.extract_features(i1, p_feat, "feat"),
                        refiner.extract_features(i1, p_feat, "ctx"),
                    ]
                )
            )
        ),
    )

    p_corr = ad.ParamSet()
    c_f1 = p_corr.add("f1", rng.normal(size=(8, 6, 6)))
    c_f2 = p_corr.add("f2", rng.normal(size=(8, 6, 6)))
    c_fl = p_corr.add("flow", rng.normal(size=(2, 6, 6)))
    run(
        "local_correlation",
        p_corr,
        lambda: ad.tmean(ad.square(ad.local_correlation(c_f1, c_f2, c_fl, 2))),
    )

    p_mvcm = _subset(base, ("enc_a.", "enc_b.", "ceb."))

    def mvcm_closure():
        out = mvcm.mvcm_forward(i1, v_mv, m_mv, p_mvcm, mc.window_radius)
        return ad.tmean(ad.absolute(ad.sub(out, ad.Tensor(tgt))))

    run("mvcm_loss", p_mvcm, mvcm_closure)

    def pipeline_closure():
        init = refiner.make_init(s, "mvcm", base, mc.window_radius, "feature")
        flows, final = refiner.iterate(s, init, 2, base, mc.corr_radius)
        preds = [ad.upsample_flow(init, refiner.FEATURE_SCALE)] + [
            ad.upsample_flow(f, refiner.FEATURE_SCALE) for f in flows
        ]
        return trainloop.sequence_loss(preds, s.f_gt, s.valid, 0.8)

    run("pipeline_2iter", base, pipeline_closure)

    def pipeline_ws_closure():
        init = refiner.make_init(s, "mvcm_warm_start", base, mc.window_radius, "feature")
        flows, _ = refiner.iterate(s, init, 2, base, mc.corr_radius)
        preds = [ad.upsample_flow(init, refiner.FEATURE_SCALE)] + [
            ad.upsample_flow(f, refiner.FEATURE_SCALE) for f in flows
        ]
        return trainloop.sequence_loss(preds, s.f_gt, s.valid, 0.8)

    run("pipeline_warmstart_2iter", base, pipeline_ws_closure)

    return results
