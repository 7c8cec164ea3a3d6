"""Training: sequence loss over intermediate predictions, AdamW with a linear
learning-rate schedule, byte-exact checkpoints, and the seeded training loop.

The loop is fully deterministic given (seed, config, data): batches, crops
and the per-step initialization choice are drawn from per-step generators.
Warm-start fine-tuning freezes the converting module (enc_a/enc_b/ceb) and
trains the two-headed credibility block and the refiner.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics, mvcm, refiner, warmstart
from .config import ModelConfig, TrainConfig, model_config_from_train
from .errors import DataError, NumericError
from .mvdata import downsample_flow
from .synth import Sample, SynthConfig, list_dataset, load_sample, synth_sample

MVCM_PREFIXES = ("enc_a.", "enc_b.", "ceb.")

CKPT_MAGIC = b"MVPRCKP1"

# training-time initialization mixture: mostly the model's own init, plus
# (near-)ground-truth states so the update stays stable at the fixed point
GT_INIT_EXACT_FRAC = 0.3
GT_INIT_NOISY_FRAC = 0.1
GT_INIT_NOISE = 0.05


def build_params(model_cfg, seed):
    """All trainable tensors of the full pipeline, fixed insertion order."""
    rng = np.random.default_rng(seed)
    params = ad.ParamSet()
    mvcm.add_mvcm_params(params, rng)
    warmstart.add_warmstart_params(params, rng)
    refiner.add_refiner_params(params, rng, model_cfg.corr_radius)
    return params


# ---------------------------------------------------------------------------
# loss


def sequence_loss(flows, gt, valid, gamma):
    """Exponentially weighted masked L1 over a prediction sequence.

    flows: list of (2,H,W) Tensors, first entry the converting-module output,
    last the final prediction; gt: (H,W,2); valid: (H,W).  Weight of flow k is
    gamma^(N-1-k); per-flow term is the mean over valid pixels of
    |du| + |dv|.
    """
    if not flows:
        raise ValueError("sequence_loss: empty prediction list")
    gt_t = ad.Tensor(refiner.chw(gt))
    v = np.asarray(valid, dtype=flows[0].dtype)
    denom = max(float(v.sum()), 1.0)
    mask2 = ad.Tensor(np.ascontiguousarray(np.stack([v, v])))
    n = len(flows)
    total = None
    for k, f in enumerate(flows):
        term = ad.scale(
            ad.tsum(ad.mul(ad.absolute(ad.sub(f, gt_t)), mask2)),
            gamma ** (n - 1 - k) / denom,
        )
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimizer


def lr_at(step, cfg):
    """Linear schedule: lr(0) = lr_start, lr(total_steps) = lr_end."""
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * (step / cfg.total_steps)


def init_moments(params):
    return {
        name: (np.zeros_like(t.data), np.zeros_like(t.data)) for name, t in params.items()
    }


def adamw_step(params, grads, moments, step, cfg, frozen=()):
    """One decoupled-weight-decay Adam update, in place.

    step is 0-based; bias correction uses t = step+1.  Parameters whose name
    starts with a frozen prefix are left untouched (moments included).
    """
    if step > cfg.total_steps:
        raise ValueError(f"adamw_step: step {step} > total_steps {cfg.total_steps}")
    lr = lr_at(step, cfg)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if any(name.startswith(pre) for pre in frozen):
            continue
        g = grads[name]
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps) + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    step: int
    model_config: ModelConfig
    train_config: TrainConfig
    arrays: dict
    moments: dict | None = None


def save_checkpoint(path, params, moments, step, model_cfg, train_cfg):
    names = params.names()
    header = {
        "version": 1,
        "step": int(step),
        "model_config": dataclasses.asdict(model_cfg),
        "train_config": dataclasses.asdict(train_cfg),
        "names": names,
        "shapes": {n: list(params[n].data.shape) for n in names},
        "has_moments": moments is not None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(np.array([len(blob)], dtype="<u4").tobytes())
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
        if moments is not None:
            for n in names:
                f.write(np.ascontiguousarray(moments[n][0], dtype="<f4").tobytes())
            for n in names:
                f.write(np.ascontiguousarray(moments[n][1], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(hlen)).decode("utf-8"))
        if header.get("version") != 1:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {}
        for n in header["names"]:
            shape = tuple(header["shapes"][n])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise DataError(f"{path}: truncated checkpoint at array {n!r}")
            arrays[n] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        moments = None
        if header["has_moments"]:
            ms, vs = {}, {}
            for store in (ms, vs):
                for n in header["names"]:
                    shape = tuple(header["shapes"][n])
                    count = int(np.prod(shape)) if shape else 1
                    buf = f.read(4 * count)
                    if len(buf) != 4 * count:
                        raise DataError(f"{path}: truncated moments at array {n!r}")
                    store[n] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            moments = {n: (ms[n], vs[n]) for n in header["names"]}
        if f.read(1):
            raise DataError(f"{path}: trailing bytes in checkpoint")
    model_cfg = ModelConfig(**header["model_config"])
    train_cfg = TrainConfig(**header["train_config"])
    return Checkpoint(
        step=int(header["step"]),
        model_config=model_cfg,
        train_config=train_cfg,
        arrays=arrays,
        moments=moments,
    )


def restore_params(ckpt):
    """Rebuild a ParamSet (and moments) from a loaded checkpoint."""
    params = build_params(ckpt.model_config, seed=0)
    if set(params.names()) != set(ckpt.arrays):
        raise DataError("checkpoint parameter names do not match the model configuration")
    params.load_arrays(ckpt.arrays)
    moments = ckpt.moments
    if moments is None:
        moments = init_moments(params)
    return params, moments


# ---------------------------------------------------------------------------
# training data plumbing


@dataclass
class TrainData:
    """Either an on-disk dataset directory or an in-memory synthetic spec."""

    samples: list
    eval_samples: list


def make_train_data(data_dir=None, synth_cfg=None, n_train=96, n_eval=16, seed=0):
    if data_dir is not None:
        dirs = list_dataset(data_dir)
        samples = [load_sample(d) for d in dirs]
        if len(samples) < 2:
            raise DataError(f"{data_dir}: need at least 2 samples")
        n_eval = max(1, min(n_eval, len(samples) // 4))
        return TrainData(samples=samples[n_eval:], eval_samples=samples[:n_eval])
    cfg = synth_cfg or SynthConfig()
    samples = [synth_sample(seed + 1000 + i, cfg) for i in range(n_train)]
    evals = [synth_sample(seed + 900000 + i, cfg) for i in range(n_eval)]
    return TrainData(samples=samples, eval_samples=evals)


def _crop_sample(s, ch, cw, rng, hflip):
    h, w = s.i1.shape[:2]
    if ch > h or cw > w:
        raise DataError(f"crop {ch}x{cw} larger than sample {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    sl = (slice(y0, y0 + ch), slice(x0, x0 + cw))
    out = Sample(
        i1=s.i1[sl],
        i2=s.i2[sl],
        f_mv=s.f_mv[sl],
        m_mv=s.m_mv[sl],
        f_gt=s.f_gt[sl],
        valid=s.valid[sl],
        f_pre=None if s.f_pre is None else s.f_pre[sl],
    )
    if hflip and rng.random() < 0.5:
        def flip_flow(f):
            f = f[:, ::-1].copy()
            f[..., 0] *= -1.0
            return f

        out = Sample(
            i1=out.i1[:, ::-1].copy(),
            i2=out.i2[:, ::-1].copy(),
            f_mv=flip_flow(out.f_mv),
            m_mv=out.m_mv[:, ::-1].copy(),
            f_gt=flip_flow(out.f_gt),
            valid=out.valid[:, ::-1].copy(),
            f_pre=None if out.f_pre is None else flip_flow(out.f_pre),
        )
    return out


# ---------------------------------------------------------------------------
# evaluation helper


def evaluate(samples, params, model_cfg, strategy="mvcm", n_iters=None, per_iteration=False):
    """Mean AEPE/F1 of the pipeline over samples; optionally per-iteration AEPE."""
    if n_iters is None:
        n_iters = 16
    aepes, f1s, per_iter = [], [], []
    for s in samples:
        init = refiner.make_init(s, strategy, params, model_cfg.window_radius, model_cfg.mvcm_resolution)
        flows, final = refiner.iterate(s, init, n_iters, params, model_cfg.corr_radius)
        pred = refiner.hwc(final.data)
        aepes.append(metrics.aepe(pred, s.f_gt, s.valid))
        f1s.append(metrics.f1_outlier(pred, s.f_gt, s.valid))
        if per_iteration:
            seq = []
            for f in flows:
                up = ad.upsample_flow(f.detach(), refiner.FEATURE_SCALE)
                seq.append(metrics.aepe(refiner.hwc(up.data), s.f_gt, s.valid))
            per_iter.append(seq)
    out = {"aepe": float(np.mean(aepes)), "f1": float(np.mean(f1s)), "per_sample_aepe": aepes}
    if per_iteration:
        out["per_iteration_aepe"] = per_iter
    return out


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_curve: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)


def _gt_noise_init(sample, rng, r, noise=0.15):
    gt = sample.f_gt
    if noise > 0:
        gt = gt + rng.normal(0.0, noise, size=gt.shape).astype(np.float32)
    lo, _ = downsample_flow(gt, np.ones_like(sample.valid), r)
    return ad.Tensor(refiner.chw(lo))


def train(
    train_cfg,
    data,
    out_dir,
    mode="scratch",
    init_checkpoint=None,
    eval_every=500,
    log_every=50,
    quiet=False,
):
    """Run the seeded training loop; returns a TrainResult.

    mode 'scratch' trains the converting module and refiner with the
    converted-MV initialization; mode 'warmstart' starts from a checkpoint,
    freezes the converting module and trains the fused warm start.
    """
    train_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    model_cfg = model_config_from_train(train_cfg)
    if mode not in ("scratch", "warmstart"):
        raise ValueError(f"train: unknown mode {mode!r}")
    frozen = MVCM_PREFIXES if mode == "warmstart" else ()
    strategy = "mvcm_warm_start" if mode == "warmstart" else "mvcm"

    if init_checkpoint is not None:
        ckpt = load_checkpoint(init_checkpoint)
        model_cfg = ckpt.model_config
        model_cfg.mvcm_resolution = train_cfg.mvcm_resolution
        params, _ = restore_params(ckpt)
        moments = init_moments(params)
    else:
        if mode == "warmstart":
            raise ValueError("train: warmstart mode requires an init checkpoint")
        params = build_params(model_cfg, seed=train_cfg.seed)
        moments = init_moments(params)

    result = TrainResult(checkpoint_path=os.path.join(out_dir, "model.ckpt"))
    n_samples = len(data.samples)
    r = refiner.FEATURE_SCALE
    t_start = time.perf_counter()

    ev = evaluate(data.eval_samples, params, model_cfg, strategy=strategy, n_iters=train_cfg.eval_iters)
    result.eval_curve.append({"step": 0, **{k: ev[k] for k in ("aepe", "f1")}})
    if not quiet:
        print(f"step {0:6d}  eval aepe {ev['aepe']:.4f}  f1 {ev['f1']:.4f}")

    for step in range(train_cfg.total_steps):
        rng = np.random.default_rng([train_cfg.seed, step])
        idxs = rng.integers(0, n_samples, size=train_cfg.batch_size)
        loss_total = None
        for bi in idxs:
            s = _crop_sample(data.samples[int(bi)], train_cfg.crop_h, train_cfg.crop_w, rng, train_cfg.hflip)
            # mostly the model's own initialization, sometimes (near-)GT so
            # the update stays stable around the fixed point
            u = rng.random()
            if u < GT_INIT_EXACT_FRAC:
                init = _gt_noise_init(s, rng, r, noise=0.0)
            elif u < GT_INIT_EXACT_FRAC + GT_INIT_NOISY_FRAC:
                init = _gt_noise_init(s, rng, r, noise=GT_INIT_NOISE)
            else:
                init = refiner.make_init(s, strategy, params, model_cfg.window_radius, model_cfg.mvcm_resolution)
            flows, _ = refiner.iterate(s, init, train_cfg.train_iters, params, model_cfg.corr_radius)
            preds = [ad.upsample_flow(init, r)] + [ad.upsample_flow(f, r) for f in flows]
            loss = sequence_loss(preds, s.f_gt, s.valid, train_cfg.loss_gamma)
            loss_total = loss if loss_total is None else ad.add(loss_total, loss)
        loss_total = ad.scale(loss_total, 1.0 / train_cfg.batch_size)
        loss_val = float(loss_total.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"train: non-finite loss {loss_val} at step {step}")

        params.zero_grad()
        tape = ad.GradTape(params)
        grads = tape.backward(loss_total)
        adamw_step(params, grads, moments, step, train_cfg, frozen=frozen)

        result.loss_curve.append(loss_val)
        if not quiet and (step + 1) % log_every == 0:
            rate = (step + 1) / (time.perf_counter() - t_start)
            print(f"step {step + 1:6d}  loss {loss_val:.4f}  ({rate:.2f} it/s)")
        if (step + 1) % eval_every == 0 or step + 1 == train_cfg.total_steps:
            ev = evaluate(data.eval_samples, params, model_cfg, strategy=strategy, n_iters=train_cfg.eval_iters)
            result.eval_curve.append({"step": step + 1, **{k: ev[k] for k in ("aepe", "f1")}})
            if not quiet:
                print(f"step {step + 1:6d}  eval aepe {ev['aepe']:.4f}  f1 {ev['f1']:.4f}")

    save_checkpoint(result.checkpoint_path, params, moments, train_cfg.total_steps, model_cfg, train_cfg)
    with open(os.path.join(out_dir, "loss_curve.jsonl"), "w", encoding="utf-8") as f:
        for i, v in enumerate(result.loss_curve):
            f.write(json.dumps({"step": i + 1, "loss": v}) + "\n")
        for ev in result.eval_curve:
            f.write(json.dumps({"eval": ev}) + "\n")
    return result
