"""Post-training module invariants that need the desk-scale checkpoint
(shared with the acceptance suite via the session-scoped `trained` fixture).
"""

import numpy as np

from mvprior import autodiff as ad
from mvprior import metrics, refiner, trainloop
from mvprior.mvdata import downsample_flow
from mvprior.synth import Sample, synth_sample


def _eval_samples(n=64):
    return [synth_sample(900000 + i) for i in range(n)]


class TestRefinerAfterTraining:
    def test_iteration_aepe_mostly_nonincreasing(self, trained):
        params = trained["params"]
        mc = trained["model_config"]
        samples = _eval_samples()
        ev = trainloop.evaluate(samples, params, mc, strategy="mvcm", n_iters=4, per_iteration=True)
        ok = tot = 0
        for seq, s in zip(ev["per_iteration_aepe"], samples):
            init = refiner.make_init(s, "mvcm", params, mc.window_radius, mc.mvcm_resolution)
            a0 = metrics.aepe(refiner.hwc(ad.upsample_flow(init, 4).data), s.f_gt, s.valid)
            full = [a0] + seq
            for k in range(len(full) - 1):
                tot += 1
                # 1e-6 guards float ties on plateaued samples only
                ok += full[k + 1] <= full[k] + 1e-6
        frac = ok / tot
        print(f"\nnon-increasing AEPE steps: {ok}/{tot} = {frac:.3f}")
        assert frac >= 0.8

    def test_one_step_from_ground_truth_init_is_stable(self, trained):
        params = trained["params"]
        mc = trained["model_config"]
        before, after = [], []
        for s in _eval_samples():
            lo, _ = downsample_flow(s.f_gt, np.ones_like(s.valid), refiner.FEATURE_SCALE)
            init = ad.Tensor(refiner.chw(lo))
            before.append(
                metrics.aepe(refiner.hwc(ad.upsample_flow(init, refiner.FEATURE_SCALE).data), s.f_gt, s.valid)
            )
            _, final = refiner.iterate(s, init, 1, params, mc.corr_radius)
            after.append(metrics.aepe(refiner.hwc(final.data), s.f_gt, s.valid))
        delta = float(np.mean(after)) - float(np.mean(before))
        print(f"\nGT-init one-step AEPE delta: {delta:+.4f} px (allowed +0.1)")
        assert delta <= 0.1


class TestMvcmAfterTraining:
    def test_smooth_exact_prior_roughly_preserved(self, trained):
        # F_mv set to a smooth ground truth with full coverage: the trained
        # converter must not damage an already-good prior
        params = trained["params"]
        mc = trained["model_config"]
        n = 64
        gy, gx = np.mgrid[0:n, 0:n].astype(np.float32)
        smooth = np.stack(
            [1.5 * np.sin(2 * np.pi * gx / 96.0) + 1.0, 1.5 * np.cos(2 * np.pi * gy / 96.0)],
            axis=-1,
        ).astype(np.float32)
        errs = []
        for seed in range(8):
            base = synth_sample(777 + seed)
            s = Sample(
                i1=base.i1, i2=base.i2, f_mv=smooth, m_mv=np.ones((n, n), np.float32),
                f_gt=smooth, valid=np.ones((n, n), np.float32),
            )
            init = refiner.make_init(s, "mvcm", params, mc.window_radius, mc.mvcm_resolution)
            up = refiner.hwc(ad.upsample_flow(init, refiner.FEATURE_SCALE).data)
            errs.append(metrics.aepe(up, smooth, s.valid))
        print(f"\nsmooth-prior preservation AEPE: mean {np.mean(errs):.3f}, max {np.max(errs):.3f}")
        assert float(np.mean(errs)) < 0.5

    def test_benchmark_example_mvcm_at_4_beats_zero_at_4(self, trained, tmp_path):
        from mvprior.bench import run_benchmark
        from mvprior.synth import write_dataset

        data_dir = str(tmp_path / "bench_data")
        write_dataset(data_dir, 8, seed=424242)
        report = run_benchmark(
            data_dir, ["zero", "mvcm"], [4], trained["params"], trained["model_config"],
            timing_repeats=1,
        )
        by = {(r["strategy"], r["iters"]): r["aepe"] for r in report.rows}
        print(f"\nbenchmark: mvcm@4 {by[('mvcm', 4)]:.3f} vs zero@4 {by[('zero', 4)]:.3f}")
        assert by[("mvcm", 4)] <= by[("zero", 4)]
