"""Command-line interface.

Subcommands: synth, rasterize, mvcm, estimate, eval, train, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench, metrics, refiner, trainloop, verify
from .config import SynthConfig, TrainConfig, apply_config, parse_config_file
from .errors import DataError, NumericError
from .flo import read_flo, write_flo
from .mvdata import rasterize, read_sidecar
from .synth import Sample, load_sample, save_mask, write_dataset
from .trainloop import load_checkpoint, restore_params


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_flags(p):
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--config", default=None, help="key-value config file")
    p.add_argument("--out", default=None, help="output directory")


def _load_configs(args):
    train_cfg, synth_cfg = TrainConfig(), SynthConfig()
    if args.config:
        entries = parse_config_file(args.config)
        train_cfg, synth_cfg = apply_config(entries, train_cfg, synth_cfg)
    if args.seed is not None:
        train_cfg.seed = args.seed
    return train_cfg, synth_cfg


def _need_out(args):
    if not args.out:
        raise UsageError("--out is required for this subcommand")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_params(path):
    ckpt = load_checkpoint(path)
    params, _ = restore_params(ckpt)
    return params, ckpt.model_config


def build_parser():
    ap = _Parser(prog="mvprior", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    _common_flags(p)
    p.add_argument("--n", type=int, default=16, help="number of samples")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--mv-noise", type=float, default=None)
    p.add_argument("--coverage", type=float, default=None)

    p = sub.add_parser("rasterize", help="rasterize a sidecar to flow.flo + mask.png")
    _common_flags(p)
    p.add_argument("sidecar", help="mvsidecar/1 file")
    p.add_argument("--no-clip", action="store_true", help="error on blocks outside the frame")

    p = sub.add_parser("mvcm", help="run the converting module on one sample")
    _common_flags(p)
    p.add_argument("--sample", required=True, help="sample directory")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("estimate", help="full pipeline on one sample")
    _common_flags(p)
    p.add_argument("--sample", default=None, help="sample directory")
    p.add_argument("--frame1", default=None)
    p.add_argument("--frame2", default=None)
    p.add_argument("--mv", default=None, help="sidecar file")
    p.add_argument("--prev-flow", default=None, help=".flo estimate of the previous frame")
    p.add_argument("--init", default="mvcm", choices=refiner.STRATEGIES)
    p.add_argument("--iters", type=int, default=16)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="benchmark grid over strategies and iteration counts")
    _common_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategies", default="zero,mvcm", help="comma-separated strategies")
    p.add_argument("--iters", default="1,2,4,8,16", help="comma-separated iteration counts")
    p.add_argument("--no-render", action="store_true")

    p = sub.add_parser("train", help="train (scratch or warm-start fine-tune)")
    _common_flags(p)
    p.add_argument("--data", default=None, help="dataset directory (default: in-memory synthetic)")
    p.add_argument("--mode", default="scratch", choices=["scratch", "warmstart"])
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--steps", type=int, default=None, help="override total_steps")
    p.add_argument("--n-train", type=int, default=96, help="synthetic training samples")
    p.add_argument("--n-eval", type=int, default=16)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification suite")
    _common_flags(p)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--max-elems", type=int, default=6, help="checked elements per parameter")

    return ap


def cmd_synth(args):
    train_cfg, synth_cfg = _load_configs(args)
    out = _need_out(args)
    for flag, field in (
        ("size", "size"),
        ("block_size", "block_size"),
        ("objects", "n_moving_objects"),
        ("mv_noise", "mv_noise"),
        ("coverage", "coverage"),
    ):
        v = getattr(args, flag)
        if v is not None:
            setattr(synth_cfg, field, v)
    synth_cfg.validate()
    manifest = write_dataset(out, args.n, train_cfg.seed, synth_cfg)
    print(f"wrote {manifest['n_samples']} samples to {out}")
    return 0


def cmd_rasterize(args):
    out = _need_out(args)
    sc = read_sidecar(args.sidecar)
    flow, mask = rasterize(sc, clip=not args.no_clip)
    write_flo(flow, os.path.join(out, "flow.flo"))
    save_mask(mask, os.path.join(out, "mask.png"))
    print(f"rasterized {len(sc.records)} records -> {out}/flow.flo, {out}/mask.png")
    return 0


def cmd_mvcm(args):
    out = _need_out(args)
    params, mc = _load_params(args.checkpoint)
    sample = load_sample(args.sample)
    init = refiner.make_init(sample, "mvcm", params, mc.window_radius, mc.mvcm_resolution)
    import mvprior.autodiff as ad

    full = ad.upsample_flow(init, refiner.FEATURE_SCALE)
    flow = refiner.hwc(full.data)
    write_flo(flow, os.path.join(out, "mvcm.flo"))
    metrics.save_png(metrics.render_flow(flow), os.path.join(out, "mvcm.png"))
    if sample.f_gt is not None:
        print(f"mvcm aepe {metrics.aepe(flow, sample.f_gt, sample.valid):.4f}")
    return 0


def _sample_from_args(args):
    if args.sample:
        s = load_sample(args.sample)
        if args.prev_flow:
            s.f_pre = read_flo(args.prev_flow)
        return s
    if not (args.frame1 and args.frame2 and args.mv):
        raise UsageError("estimate needs --sample or all of --frame1/--frame2/--mv")
    from .synth import load_image

    i1 = load_image(args.frame1)
    i2 = load_image(args.frame2)
    sc = read_sidecar(args.mv)
    f_mv, m_mv = rasterize(sc)
    f_pre = read_flo(args.prev_flow) if args.prev_flow else None
    return Sample(i1=i1, i2=i2, f_mv=f_mv, m_mv=m_mv, f_gt=None, valid=None, f_pre=f_pre, sidecar=sc)


def cmd_estimate(args):
    out = _need_out(args)
    params, mc = _load_params(args.checkpoint)
    sample = _sample_from_args(args)
    if args.init in ("warm_start", "mvcm_warm_start") and sample.f_pre is None:
        raise UsageError(f"--init {args.init} requires --prev-flow (or prev.flo in the sample)")
    init = refiner.make_init(sample, args.init, params, mc.window_radius, mc.mvcm_resolution)
    _, final = refiner.iterate(sample, init, args.iters, params, mc.corr_radius)
    flow = refiner.hwc(final.data)
    write_flo(flow, os.path.join(out, "flow.flo"))
    metrics.save_png(metrics.render_flow(flow), os.path.join(out, "flow.png"))
    if sample.f_gt is not None:
        metrics.save_png(
            metrics.render_error_map(flow, sample.f_gt, sample.valid),
            os.path.join(out, "error.png"),
        )
        print(
            f"aepe {metrics.aepe(flow, sample.f_gt, sample.valid):.4f}  "
            f"f1 {metrics.f1_outlier(flow, sample.f_gt, sample.valid):.4f}"
        )
    return 0


def cmd_eval(args):
    out = _need_out(args)
    params, mc = _load_params(args.checkpoint)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    iters = [int(s) for s in args.iters.split(",") if s.strip()]
    report = bench.run_benchmark(
        args.data, strategies, iters, params, mc, out_dir=out, render=not args.no_render
    )
    print(report.table())
    return 0


def cmd_train(args):
    train_cfg, synth_cfg = _load_configs(args)
    out = _need_out(args)
    if args.steps is not None:
        train_cfg.total_steps = args.steps
    train_cfg.validate()
    data = trainloop.make_train_data(
        data_dir=args.data,
        synth_cfg=synth_cfg,
        n_train=args.n_train,
        n_eval=args.n_eval,
        seed=train_cfg.seed,
    )
    res = trainloop.train(
        train_cfg,
        data,
        out,
        mode=args.mode,
        init_checkpoint=args.init_checkpoint,
        eval_every=args.eval_every,
        quiet=args.quiet,
    )
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def cmd_gradcheck(args):
    results = verify.gradient_suite(
        tolerance=args.tolerance, max_elems=args.max_elems, progress=lambda n: print(f"checking {n} ...")
    )
    failed = False
    for name, rep in results:
        worst = max((p.max_rel_err for p in rep.params), default=0.0)
        excluded = sum(p.n_excluded for p in rep.params)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{name:30s} {status}  worst rel err {worst:.3e}  excluded {excluded}  kinks {rep.kink_points}")
        failed = failed or not rep.passed
    if failed:
        raise NumericError("gradient suite failed")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "rasterize": cmd_rasterize,
    "mvcm": cmd_mvcm,
    "estimate": cmd_estimate,
    "eval": cmd_eval,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
