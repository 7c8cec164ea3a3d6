"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line.  The training-dependent criteria share one session-scoped
2k-step seeded run (the `trained` fixture).
"""

import os
import time

import numpy as np
import pytest

from oracles import aepe_oracle, f1_oracle, window_attention_oracle
from mvprior import autodiff as ad
from mvprior import kernels, metrics, mvcm, refiner, trainloop, verify, warmstart
from mvprior.flo import read_flo, write_flo
from mvprior.kernels import reference as ref_backend
from mvprior.mvdata import rasterize, read_sidecar, write_sidecar
from mvprior.synth import synth_sample

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def _report(name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


class TestOracleEquivalence:
    def test_window_and_fused_aggregate_match_bruteforce(self):
        rng = np.random.default_rng(7)
        t0 = time.perf_counter()
        worst64 = 0.0
        worst32 = 0.0
        backends = [kernels.impl]
        if kernels.impl is not ref_backend:
            backends.append(ref_backend)
        for case in range(200):
            h = int(rng.integers(4, 17))
            w = int(rng.integers(4, 17))
            d = int(rng.integers(1, 4))
            c = int(rng.integers(2, 9))
            fused = bool(case % 2)
            Q = rng.normal(size=(c, h, w))
            K = rng.normal(size=(c, h, w))
            Vm = rng.normal(size=(2, h, w)) * 5
            Cm = rng.random((h, w))
            Vp = rng.normal(size=(2, h, w)) * 5 if fused else None
            Cp = rng.random((h, w)) if fused else None
            want = window_attention_oracle(Q, K, Vm, Cm, Vp, Cp, d=d)
            backend = backends[case % len(backends)]
            got, _ = backend.window_attention_fwd(
                Q, K, Vm, Cm, Vp, Cp, d, 1.0 / np.sqrt(c), 1e-8
            )
            worst64 = max(worst64, float(np.abs(got - want).max()))
            got32, _ = backend.window_attention_fwd(
                Q.astype(np.float32), K.astype(np.float32), Vm.astype(np.float32),
                Cm.astype(np.float32),
                None if Vp is None else Vp.astype(np.float32),
                None if Cp is None else Cp.astype(np.float32),
                d, 1.0 / np.sqrt(c), 1e-8,
            )
            worst32 = max(worst32, float(np.abs(got32 - want).max()))
        elapsed = time.perf_counter() - t0
        _report(
            "oracle equivalence: 200 randomized window/fused instances",
            worst64 < 1e-5 and elapsed < 60.0,
            f"max abs err {worst64:.2e} (float32 path {worst32:.2e}), {elapsed:.1f}s",
        )


class TestGradientSuite:
    def test_every_block_and_pipeline(self):
        results = verify.gradient_suite(tolerance=1e-6, max_elems=6)
        bad = [name for name, rep in results if not rep.passed]
        detail = ", ".join(
            f"{name}:{max((p.max_rel_err for p in rep.params), default=0):.1e}"
            for name, rep in results
        )
        _report("gradient suite: blocks + 2-iteration pipeline at rtol 1e-6", not bad, detail)


class TestReductions:
    def test_one_hot_credibility_identity(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            d = int(rng.integers(1, 4))
            n = 4 * d + 3
            v = rng.normal(size=(2, n, n)) * 5
            c = np.zeros((n, n))
            probes = [(d, d), (d, n - d - 1), (n - d - 1, d), (n - d - 1, n - d - 1)]
            for i, j in probes:
                c[i, j] = 1.0
            q = np.zeros((4, n, n))
            out, _ = kernels.impl.window_attention_fwd(q, q, v, c, None, None, d, 0.5, 1e-8)
            for i, j in probes:
                rel = np.abs(out[:, i, j] - v[:, i, j]) / np.abs(v[:, i, j])
                worst = max(worst, float(rel.max()))
        _report("reduction: one-hot credibility acts as identity on V", worst < 1e-6, f"max rel {worst:.2e}")

    def test_zero_projected_credibility_collapses_exactly(self):
        rng = np.random.default_rng(4)
        ok = True
        for _ in range(50):
            h = int(rng.integers(4, 13))
            w = int(rng.integers(4, 13))
            q = rng.normal(size=(5, h, w))
            k = rng.normal(size=(5, h, w))
            vm = rng.normal(size=(2, h, w)) * 4
            vp = rng.normal(size=(2, h, w)) * 4
            cm = rng.random((h, w))
            fused = warmstart.fused_aggregate(
                ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp),
                ad.Tensor(cm), ad.Tensor(np.zeros((h, w))), d=2,
            ).data
            single = mvcm.window_aggregate(
                ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(cm), d=2
            ).data
            ok = ok and np.array_equal(fused, single)
        _report("reduction: zero projected credibility == single-source form, bit-exact", ok)

    def test_convex_hull_bound_1000(self):
        rng = np.random.default_rng(5)
        violations = 0
        for case in range(1000):
            h = int(rng.integers(3, 10))
            w = int(rng.integers(3, 10))
            d = int(rng.integers(1, 4))
            fused = bool(case % 2)
            q = rng.normal(size=(3, h, w))
            k = rng.normal(size=(3, h, w))
            vm = rng.normal(size=(2, h, w)) * 10
            cm = rng.random((h, w))
            vp = rng.normal(size=(2, h, w)) * 10 if fused else None
            cp = rng.random((h, w)) if fused else None
            out, _ = kernels.impl.window_attention_fwd(q, k, vm, cm, vp, cp, d, 0.57, 1e-8)
            for i in range(h):
                for j in range(w):
                    sl = (slice(None), slice(max(0, i - d), i + d + 1), slice(max(0, j - d), j + d + 1))
                    lo = vm[sl].min(axis=(1, 2))
                    hi = vm[sl].max(axis=(1, 2))
                    if fused:
                        lo = np.minimum(lo, vp[sl].min(axis=(1, 2)))
                        hi = np.maximum(hi, vp[sl].max(axis=(1, 2)))
                    if (out[:, i, j] < lo - 1e-9).any() or (out[:, i, j] > hi + 1e-9).any():
                        violations += 1
        _report("reduction: convex-hull bound on 1000 random instances", violations == 0, f"{violations} violations")


class TestForwardWarpConservation:
    def test_in_bounds_mass_and_identity(self):
        rng = np.random.default_rng(6)
        ok_mass = True
        worst = 0.0
        for _ in range(20):
            h = int(rng.integers(8, 24))
            w = int(rng.integers(8, 24))
            gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
            tx = rng.uniform(0, w - 1 - 1e-6, size=(h, w))
            ty = rng.uniform(0, h - 1 - 1e-6, size=(h, w))
            f = np.stack([tx - gx, ty - gy], axis=-1)
            _, wacc = kernels.bilinear_splat(f.reshape(-1, 2), tx.reshape(-1), ty.reshape(-1), h, w)
            err = abs(float(wacc.sum()) - h * w)
            worst = max(worst, err)
            ok_mass = ok_mass and err < 1e-3
        f0 = np.zeros((12, 15, 2), np.float32)
        f_prj, m_prj = warmstart.forward_warp(f0)
        ok_id = np.array_equal(f_prj, f0) and np.all(m_prj == 1.0)
        _report(
            "forward warp: in-bounds splat mass = H*W within 1e-3; zero-flow warp is identity",
            ok_mass and ok_id,
            f"worst mass err {worst:.2e}",
        )


class TestMetricFidelity:
    def test_metrics_match_oracles_and_boundary_cases(self):
        rng = np.random.default_rng(8)
        worst_aepe = worst_f1 = 0.0
        for _ in range(25):
            h = int(rng.integers(3, 12))
            w = int(rng.integers(3, 12))
            pred = rng.normal(size=(h, w, 2)) * 8
            gt = rng.normal(size=(h, w, 2)) * 8
            valid = (rng.random((h, w)) > 0.3).astype(np.float64)
            if valid.sum() == 0:
                valid[0, 0] = 1.0
            worst_aepe = max(worst_aepe, abs(metrics.aepe(pred, gt, valid) - aepe_oracle(pred, gt, valid)))
            worst_f1 = max(worst_f1, abs(metrics.f1_outlier(pred, gt, valid) - f1_oracle(pred, gt, valid)))
        # 3-4-5 pixel
        gt = np.zeros((3, 3, 2))
        gt[1, 1] = (3.0, 4.0)
        valid = np.zeros((3, 3))
        valid[1, 1] = 1.0
        exact_345 = metrics.aepe(np.zeros((3, 3, 2)), gt, valid) == 5.0
        # KITTI rule boundaries
        g1 = np.zeros((1, 1, 2)); g1[0, 0] = (10.0, 0.0)
        p1 = g1.copy(); p1[0, 0, 0] += 4.0
        g2 = np.zeros((1, 1, 2)); g2[0, 0] = (100.0, 0.0)
        p2 = g2.copy(); p2[0, 0, 0] += 4.0
        kitti_ok = (
            metrics.f1_outlier(p1, g1, np.ones((1, 1))) == 1.0
            and metrics.f1_outlier(p2, g2, np.ones((1, 1))) == 0.0
        )
        _report(
            "metric fidelity: AEPE/F1 vs loop oracles within 1e-6; 3-4-5 and KITTI boundaries exact",
            worst_aepe < 1e-6 and worst_f1 < 1e-6 and exact_345 and kitti_ok,
            f"aepe err {worst_aepe:.2e}, f1 err {worst_f1:.2e}",
        )


class TestLearningProgress:
    def test_2k_step_training_halves_eval_aepe(self, trained):
        a0 = trained["step0_aepe"]
        a1 = trained["final_aepe"]
        wall = trained["wall_seconds"]
        _report(
            "learning progress: 2k seeded steps reduce eval AEPE below 0.5x step-0",
            a1 < 0.5 * a0 and wall < 1800.0,
            f"step0 {a0:.3f} -> final {a1:.3f} ({a1 / a0:.3f}x) in {wall / 60:.1f} min",
        )


class TestDirectionalTrend:
    @pytest.fixture(scope="class")
    def grid(self, trained):
        samples = [synth_sample(900000 + i) for i in range(64)]
        params = trained["params"]
        mc = trained["model_config"]
        out = {}
        for strat in ("zero", "mvcm", "raw_mv"):
            for it in (4, 16):
                ev = trainloop.evaluate(samples, params, mc, strategy=strat, n_iters=it)
                out[(strat, it)] = ev["aepe"]
        return out

    def test_mvcm_beats_zero_at_4(self, grid):
        _report(
            "trend: mvcm init <= zero init at 4 iterations",
            grid[("mvcm", 4)] <= grid[("zero", 4)],
            f"mvcm@4 {grid[('mvcm', 4)]:.3f} vs zero@4 {grid[('zero', 4)]:.3f}",
        )

    def test_mvcm_efficiency_vs_16_iter_zero(self, grid):
        branch1 = grid[("mvcm", 4)] <= grid[("zero", 16)]
        branch2 = grid[("mvcm", 16)] < grid[("zero", 16)]
        _report(
            "trend: mvcm@4 <= zero@16 OR mvcm@16 < zero@16",
            branch1 or branch2,
            f"mvcm@4 {grid[('mvcm', 4)]:.3f}, mvcm@16 {grid[('mvcm', 16)]:.3f}, zero@16 {grid[('zero', 16)]:.3f}",
        )

    def test_raw_mv_does_not_beat_mvcm(self, grid):
        _report(
            "trend: raw block-MV init does not beat the converted init",
            grid[("raw_mv", 16)] >= grid[("mvcm", 16)],
            f"raw@16 {grid[('raw_mv', 16)]:.3f} vs mvcm@16 {grid[('mvcm', 16)]:.3f} "
            f"(raw@4 {grid[('raw_mv', 4)]:.3f} vs mvcm@4 {grid[('mvcm', 4)]:.3f})",
        )


class TestFormatRoundTrips:
    def test_golden_files_byte_exact(self, tmp_path):
        # .flo: load golden, rewrite, compare bytes
        flo_path = os.path.join(GOLDEN, "golden.flo")
        flow = read_flo(flo_path)
        out_flo = tmp_path / "rt.flo"
        write_flo(flow, out_flo)
        flo_ok = out_flo.read_bytes() == open(flo_path, "rb").read()

        mvs_path = os.path.join(GOLDEN, "golden.mvs")
        sc = read_sidecar(mvs_path)
        out_mvs = tmp_path / "rt.mvs"
        write_sidecar(sc, out_mvs)
        mvs_ok = out_mvs.read_bytes() == open(mvs_path, "rb").read()

        ck_path = os.path.join(GOLDEN, "golden.ckpt")
        ckpt = trainloop.load_checkpoint(ck_path)
        params = ad.ParamSet()
        for name, arr in ckpt.arrays.items():
            params.add(name, arr)
        out_ck = tmp_path / "rt.ckpt"
        trainloop.save_checkpoint(
            out_ck, params, ckpt.moments, ckpt.step, ckpt.model_config, ckpt.train_config
        )
        ck_ok = out_ck.read_bytes() == open(ck_path, "rb").read()

        # rasterization of the golden sidecar still reproduces the golden flow
        flow2, _ = rasterize(sc)
        raster_ok = flow2.tobytes() == flow.tobytes()

        _report(
            "format round-trips: .flo, sidecar, checkpoint byte-exact on golden files",
            flo_ok and mvs_ok and ck_ok and raster_ok,
            f"flo={flo_ok} mvs={mvs_ok} ckpt={ck_ok} raster={raster_ok}",
        )
