import numpy as np
import pytest

from oracles import splat_mass_oracle, window_attention_oracle
from mvprior import autodiff as ad
from mvprior import kernels, mvcm, trainloop, warmstart
from mvprior.config import ModelConfig


def build_sub(prefixes, seed=0):
    params = trainloop.build_params(ModelConfig(), seed=seed)
    sub = ad.ParamSet()
    for name, t in params.items():
        if name.startswith(prefixes):
            sub.add(name, t.data)
    return sub


class TestForwardWarp:
    def test_zero_flow_identity(self, rng):
        f = np.zeros((9, 12, 2), np.float32)
        f_prj, m_prj = warmstart.forward_warp(f)
        assert np.array_equal(f_prj, f)
        assert np.all(m_prj == 1.0)

    def test_zero_flow_identity_on_values(self, rng):
        # targets are integral, so value/weight recovery is exact; the warp of
        # a zero field must return the field itself
        f = np.zeros((8, 8, 2), np.float32)
        f_prj, m_prj = warmstart.forward_warp(f)
        assert f_prj.tobytes() == f.tobytes()

    def test_integer_shift(self):
        h, w = 10, 12
        f = np.zeros((h, w, 2), np.float32)
        f[..., 0] = 5.0
        f_prj, m_prj = warmstart.forward_warp(f)
        assert np.all(m_prj[:, :5] == 0.0)
        assert np.all(m_prj[:, 5:] == 1.0)
        assert np.all(f_prj[:, 5:, 0] == 5.0)
        assert np.all(f_prj[:, :5] == 0.0)

    def test_splat_mass_matches_loop_oracle(self, rng):
        f = (rng.normal(size=(9, 11, 2)) * 3).astype(np.float32)
        _, wacc = kernels.bilinear_splat(
            f.reshape(-1, 2),
            (np.mgrid[0:9, 0:11][1].astype(np.float32) + f[..., 0]).reshape(-1),
            (np.mgrid[0:9, 0:11][0].astype(np.float32) + f[..., 1]).reshape(-1),
            9,
            11,
        )
        assert abs(float(wacc.sum()) - splat_mass_oracle(f)) < 1e-4

    def test_in_bounds_mass_conserved(self, rng):
        h, w = 16, 16
        gy, gx = np.mgrid[0:h, 0:w].astype(np.float32)
        # targets pulled strictly inside [0, n-1] so no splat mass is clipped
        tx = rng.uniform(0, w - 1 - 1e-3, size=(h, w)).astype(np.float32)
        ty = rng.uniform(0, h - 1 - 1e-3, size=(h, w)).astype(np.float32)
        f = np.stack([tx - gx, ty - gy], axis=-1)
        _, wacc = kernels.bilinear_splat(f.reshape(-1, 2), tx.reshape(-1), ty.reshape(-1), h, w)
        assert abs(float(wacc.sum()) - h * w) < 1e-3

    def test_mask_zero_implies_flow_zero(self, rng):
        f = (rng.normal(size=(12, 12, 2)) * 6).astype(np.float32)
        f_prj, m_prj = warmstart.forward_warp(f)
        assert np.all(f_prj[m_prj == 0.0] == 0.0)
        assert (m_prj >= 0).all() and (m_prj <= 1).all()

    def test_nonfinite_rejected(self):
        f = np.zeros((4, 4, 2), np.float32)
        f[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            warmstart.forward_warp(f)


class TestCredibility2:
    def test_zero_head_gives_half(self, rng):
        sub = build_sub(("ceb2.",))
        sub["ceb2.conv11.w"].data = np.zeros_like(sub["ceb2.conv11.w"].data)
        sub["ceb2.conv11.b"].data = np.zeros_like(sub["ceb2.conv11.b"].data)
        i1 = ad.Tensor(rng.random((3, 8, 8)).astype(np.float32))
        m = ad.Tensor(np.ones((1, 8, 8), np.float32))
        c_prj, c_mv = warmstart.estimate_credibility2(i1, m, m, sub)
        assert np.all(c_prj.data == 0.5) and np.all(c_mv.data == 0.5)

    def test_outputs_in_open_interval(self, rng):
        sub = build_sub(("ceb2.",), seed=5)
        i1 = ad.Tensor(rng.random((3, 10, 10)).astype(np.float32))
        m1 = ad.Tensor((rng.random((1, 10, 10)) > 0.5).astype(np.float32))
        m2 = ad.Tensor((rng.random((1, 10, 10)) > 0.5).astype(np.float32))
        c_prj, c_mv = warmstart.estimate_credibility2(i1, m1, m2, sub)
        for c in (c_prj.data, c_mv.data):
            assert (c > 0).all() and (c < 1).all()

    def test_receptive_field_locality(self, rng):
        sub = build_sub(("ceb2.",), seed=5)
        i1 = rng.random((3, 64, 64)).astype(np.float32)
        m = np.ones((1, 64, 64), np.float32)
        base = warmstart.estimate_credibility2(ad.Tensor(i1), ad.Tensor(m), ad.Tensor(m), sub)[0].data
        far = i1.copy()
        far[:, 5, 45] += 1.0  # distance 40 > receptive radius 27
        pert = warmstart.estimate_credibility2(ad.Tensor(far), ad.Tensor(m), ad.Tensor(m), sub)[0].data
        assert pert[5, 5] == base[5, 5]


class TestFusedAggregate:
    def _inputs(self, rng, h=8, w=8, c=6):
        return (
            rng.normal(size=(c, h, w)),
            rng.normal(size=(c, h, w)),
            rng.normal(size=(2, h, w)) * 4,
            rng.normal(size=(2, h, w)) * 4,
            rng.random((h, w)),
            rng.random((h, w)),
        )

    def test_zero_projected_credibility_reduces_exactly(self, rng):
        q, k, vm, vp, cm, _ = self._inputs(rng)
        fused = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp),
            ad.Tensor(cm), ad.Tensor(np.zeros_like(cm)), d=2,
        ).data
        single = mvcm.window_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(cm), d=2
        ).data
        assert np.array_equal(fused, single)

    def test_constant_both_sources(self, rng):
        q, k, _, _, cm, cp = self._inputs(rng)
        c = 2.75
        vm = np.full((2, 8, 8), c)
        out = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vm.copy()),
            ad.Tensor(cm), ad.Tensor(cp), d=2,
        ).data
        assert np.abs(out - c).max() < 1e-6

    def test_matches_bruteforce_oracle(self, rng):
        q, k, vm, vp, cm, cp = self._inputs(rng)
        got = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp),
            ad.Tensor(cm), ad.Tensor(cp), d=2,
        ).data
        want = window_attention_oracle(q, k, vm, cm, vp, cp, d=2)
        assert np.abs(got - want).max() < 1e-5

    def test_source_swap_symmetry(self, rng):
        q, k, vm, vp, cm, cp = self._inputs(rng)
        a = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp),
            ad.Tensor(cm), ad.Tensor(cp), d=2,
        ).data
        b = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vp), ad.Tensor(vm),
            ad.Tensor(cp), ad.Tensor(cm), d=2,
        ).data
        assert np.abs(a - b).max() < 1e-6

    def test_convex_hull_over_union(self, rng):
        q, k, vm, vp, cm, cp = self._inputs(rng)
        out = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp),
            ad.Tensor(cm), ad.Tensor(cp), d=2,
        ).data
        d = 2
        for i in range(8):
            for j in range(8):
                sl = (slice(None), slice(max(0, i - d), i + d + 1), slice(max(0, j - d), j + d + 1))
                lo = np.minimum(vm[sl].min(axis=(1, 2)), vp[sl].min(axis=(1, 2)))
                hi = np.maximum(vm[sl].max(axis=(1, 2)), vp[sl].max(axis=(1, 2)))
                assert (out[:, i, j] >= lo - 1e-9).all() and (out[:, i, j] <= hi + 1e-9).all()

    def test_hole_region_never_propagates(self, rng):
        q, k, vm, vp, cm, cp = self._inputs(rng)
        hole = np.zeros((8, 8), bool)
        hole[2:5, 3:6] = True
        cp = cp.copy()
        cp[hole] = 0.0
        base = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp),
            ad.Tensor(cm), ad.Tensor(cp), d=2,
        ).data
        vp2 = vp.copy()
        vp2[:, hole] = 1e6  # garbage inside the hole
        pert = warmstart.fused_aggregate(
            ad.Tensor(q), ad.Tensor(k), ad.Tensor(vm), ad.Tensor(vp2),
            ad.Tensor(cm), ad.Tensor(cp), d=2,
        ).data
        assert np.array_equal(base, pert)
