"""Compare the compiled kernel backend against the numpy fallback.

Times the three hot kernels (windowed attention aggregation forward/backward,
bilinear gather forward/backward, forward-warp splatting) at training-like
shapes, plus one full training step through the autodiff engine under each
backend.

Run:  python benchmarks/benchmark_kernels.py
"""

import time

import numpy as np


def timeit(fn, reps=20):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def bench_backend(impl, rng):
    out = {}
    Q = rng.normal(size=(64, 16, 16)).astype(np.float32)
    K = rng.normal(size=(64, 16, 16)).astype(np.float32)
    Vm = rng.normal(size=(2, 16, 16)).astype(np.float32)
    Cm = rng.random((16, 16)).astype(np.float32)
    g = rng.normal(size=(2, 16, 16)).astype(np.float32)
    out["attention fwd (64ch 16x16 d3)"] = timeit(
        lambda: impl.window_attention_fwd(Q, K, Vm, Cm, None, None, 3, 0.125, 1e-8)
    )
    _, cache = impl.window_attention_fwd(Q, K, Vm, Cm, None, None, 3, 0.125, 1e-8)
    out["attention bwd"] = timeit(lambda: impl.window_attention_bwd(g, cache, 3, 0.125, 1e-8))

    img = rng.normal(size=(64, 16, 16)).astype(np.float32)
    n = 49 * 16 * 16
    x = (rng.random(n) * 18 - 1).astype(np.float32)
    y = (rng.random(n) * 18 - 1).astype(np.float32)
    dval = rng.normal(size=(n, 64)).astype(np.float32)
    out[f"gather fwd ({n} pts, 64ch)"] = timeit(lambda: impl.bilinear_gather_fwd(img, x, y, "zero"))
    out["gather bwd (+positions)"] = timeit(
        lambda: impl.bilinear_gather_bwd(img, x, y, dval, "zero", True), reps=10
    )

    m = 64 * 64
    vx = (rng.random(m) * 63).astype(np.float32)
    vy = (rng.random(m) * 63).astype(np.float32)
    val = rng.normal(size=(m, 2)).astype(np.float32)
    out["splat (64x64 field)"] = timeit(lambda: impl.bilinear_splat(val, vx, vy, 64, 64))
    return out


def bench_train_step():
    from mvprior import autodiff as ad
    from mvprior import refiner, trainloop
    from mvprior.config import ModelConfig
    from mvprior.synth import synth_sample

    mc = ModelConfig()
    params = trainloop.build_params(mc, seed=0)
    s = synth_sample(5)

    def one():
        init = refiner.make_init(s, "mvcm", params, mc.window_radius, mc.mvcm_resolution)
        flows, _ = refiner.iterate(s, init, 4, params, mc.corr_radius)
        preds = [ad.upsample_flow(init, 4)] + [ad.upsample_flow(f, 4) for f in flows]
        loss = trainloop.sequence_loss(preds, s.f_gt, s.valid, 0.8)
        params.zero_grad()
        ad.GradTape(params).backward(loss)

    return timeit(one, reps=5)


def main():
    from mvprior import kernels
    from mvprior.kernels import reference

    rng = np.random.default_rng(0)
    rows = {}
    rows["numpy"] = bench_backend(reference, rng)
    have_ext = kernels.impl is not reference
    if have_ext:
        rows["cython"] = bench_backend(kernels.impl, rng)

    names = list(rows["numpy"])
    cols = list(rows)
    print(f"{'kernel':<34}" + "".join(f"{c:>12}" for c in cols) + ("     speedup" if have_ext else ""))
    print("-" * (34 + 12 * len(cols) + (12 if have_ext else 0)))
    for n in names:
        line = f"{n:<34}" + "".join(f"{rows[c][n]:>10.2f}ms" for c in cols)
        if have_ext:
            line += f"{rows['numpy'][n] / rows['cython'][n]:>10.1f}x"
        print(line)

    print(f"\nselected backend: {kernels.BACKEND}")
    print(f"full train step (fwd+bwd, 64x64, 4 iters): {bench_train_step():.1f} ms")


if __name__ == "__main__":
    main()
