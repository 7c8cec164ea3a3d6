"""Benchmark harness: the initialization-strategy x iteration-count grid.

Metrics are computed once per cell over the whole dataset; the reported
wall-clock is the median of 5 repeated inferences of the first sample, so the
metric tables are reproducible independently of timing jitter.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, refiner
from .errors import DataError
from .synth import list_dataset, load_sample


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    n_samples: int = 0

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for row in self.rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")

    def table(self):
        lines = [
            f"{'strategy':<18} {'iters':>5} {'aepe':>8} {'f1':>8} {'ms/frame':>9}",
            "-" * 52,
        ]
        for r in self.rows:
            lines.append(
                f"{r['strategy']:<18} {r['iters']:>5d} {r['aepe']:>8.3f} "
                f"{r['f1']:>8.4f} {r['time_ms']:>9.1f}"
            )
        return "\n".join(lines)


def _infer(sample, strategy, n_iters, params, model_cfg):
    init = refiner.make_init(
        sample, strategy, params, model_cfg.window_radius, model_cfg.mvcm_resolution
    )
    _, final = refiner.iterate(sample, init, n_iters, params, model_cfg.corr_radius)
    return refiner.hwc(final.data)


def run_benchmark(
    data_dir,
    strategies,
    iteration_counts,
    params,
    model_cfg,
    out_dir=None,
    timing_repeats=5,
    render=False,
):
    """Evaluate every (strategy, iteration count) cell on a dataset directory."""
    sample_dirs = list_dataset(data_dir)
    samples = [load_sample(d) for d in sample_dirs]
    for i, s in enumerate(samples):
        if s.f_gt is None:
            raise DataError(f"{sample_dirs[i]}: benchmark requires ground-truth gt.flo")
    for strat in strategies:
        if strat not in refiner.STRATEGIES:
            raise ValueError(f"run_benchmark: unknown strategy {strat!r}")
        if strat in ("warm_start", "mvcm_warm_start") and any(s.f_pre is None for s in samples):
            raise DataError(f"strategy {strat!r} requires prev.flo in every sample")

    report = EvalReport(n_samples=len(samples))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for strat in strategies:
        for n_iters in iteration_counts:
            aepes, f1s = [], []
            for i, s in enumerate(samples):
                pred = _infer(s, strat, n_iters, params, model_cfg)
                aepes.append(metrics.aepe(pred, s.f_gt, s.valid))
                f1s.append(metrics.f1_outlier(pred, s.f_gt, s.valid))
                if render and out_dir and i == 0:
                    base = os.path.join(out_dir, f"{strat}_it{n_iters}")
                    metrics.save_png(metrics.render_flow(pred), base + "_flow.png")
                    metrics.save_png(
                        metrics.render_error_map(pred, s.f_gt, s.valid), base + "_err.png"
                    )
            times = []
            for _ in range(timing_repeats):
                t0 = time.perf_counter()
                _infer(samples[0], strat, n_iters, params, model_cfg)
                times.append((time.perf_counter() - t0) * 1e3)
            report.rows.append(
                {
                    "strategy": strat,
                    "iters": int(n_iters),
                    "aepe": float(np.mean(aepes)),
                    "f1": float(np.mean(f1s)),
                    "time_ms": float(np.median(times)),
                    "per_sample_aepe": [float(a) for a in aepes],
                }
            )
    if out_dir:
        report.to_jsonl(os.path.join(out_dir, "report.jsonl"))
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report.table() + "\n")
    return report
