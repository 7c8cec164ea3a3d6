"""Independent brute-force oracles used by the test suite.

These deliberately re-derive every quantity with naive loops (or closed
forms), sharing no code with the implementations they check.
"""

import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, dilation=1, padding=None):
    """Direct seven-loop cross-correlation, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    if padding is None:
        padding = dilation * (kh - 1) // 2
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky * dilation - padding
                            ix = ox * stride + kx * dilation - padding
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += x[ci, iy, ix] * w[co, ci, ky, kx]
                out[co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


def naive_softmax(z):
    z = [float(v) for v in z]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return np.array([v / s for v in e])


def window_attention_oracle(Q, K, Vm, Cm, Vp=None, Cp=None, d=2, eps=1e-8):
    """Per-pixel double-loop windowed aggregation, float64."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    C, H, W = Q.shape
    scale = 1.0 / math.sqrt(C)
    out = np.zeros((2, H, W))
    for i in range(H):
        for j in range(W):
            logits, taps = [], []
            for k in range(-d, d + 1):
                for l in range(-d, d + 1):
                    ii, jj = i + k, j + l
                    if 0 <= ii < H and 0 <= jj < W:
                        logits.append(scale * float(np.dot(Q[:, i, j], K[:, ii, jj])))
                        taps.append((ii, jj))
            s = naive_softmax(logits)
            num = np.zeros(2)
            den = 0.0
            for sv, (ii, jj) in zip(s, taps):
                wm = sv * float(Cm[ii, jj])
                num += wm * np.asarray(Vm[:, ii, jj], dtype=np.float64)
                den += wm
                if Vp is not None:
                    wp = sv * float(Cp[ii, jj])
                    num += wp * np.asarray(Vp[:, ii, jj], dtype=np.float64)
                    den += wp
            out[:, i, j] = num / (den + eps)
    return out


def rasterize_oracle(records, w, h):
    """Per-pixel loop application of records in order; returns (flow, mask)."""
    flow = np.zeros((h, w, 2))
    mask = np.zeros((h, w))
    for r in records:
        for y in range(h):
            for x in range(w):
                if r.block_x <= x < r.block_x + r.block_w and r.block_y <= y < r.block_y + r.block_h:
                    flow[y, x, 0] = r.mv_dx / r.mv_scale
                    flow[y, x, 1] = r.mv_dy / r.mv_scale
                    mask[y, x] = 1.0
    return flow, mask


def downsample_oracle(flow, mask, factor):
    h, w = mask.shape
    ho, wo = h // factor, w // factor
    out = np.zeros((ho, wo, 2))
    mout = np.zeros((ho, wo))
    for by in range(ho):
        for bx in range(wo):
            ws = 0.0
            fs = np.zeros(2)
            for y in range(by * factor, (by + 1) * factor):
                for x in range(bx * factor, (bx + 1) * factor):
                    ws += mask[y, x]
                    fs += mask[y, x] * flow[y, x]
            if ws > 0:
                out[by, bx] = fs / ws / factor
            mout[by, bx] = ws / (factor * factor)
    return out, mout


def splat_mass_oracle(f_pre):
    """Total in-bounds bilinear splat mass of a forward warp."""
    h, w = f_pre.shape[:2]
    total = 0.0
    for y in range(h):
        for x in range(w):
            tx = x + float(f_pre[y, x, 0])
            ty = y + float(f_pre[y, x, 1])
            x0, y0 = math.floor(tx), math.floor(ty)
            fx, fy = tx - x0, ty - y0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    if 0 <= x0 + dx < w and 0 <= y0 + dy < h:
                        total += wx * wy
    return total


def aepe_oracle(pred, gt, valid):
    total = 0.0
    count = 0.0
    h, w = valid.shape
    for y in range(h):
        for x in range(w):
            if valid[y, x] > 0:
                du = float(pred[y, x, 0]) - float(gt[y, x, 0])
                dv = float(pred[y, x, 1]) - float(gt[y, x, 1])
                total += valid[y, x] * math.sqrt(du * du + dv * dv)
                count += valid[y, x]
    return total / count


def f1_oracle(pred, gt, valid):
    out = 0.0
    count = 0.0
    h, w = valid.shape
    for y in range(h):
        for x in range(w):
            if valid[y, x] > 0:
                du = float(pred[y, x, 0]) - float(gt[y, x, 0])
                dv = float(pred[y, x, 1]) - float(gt[y, x, 1])
                epe = math.sqrt(du * du + dv * dv)
                mag = math.sqrt(float(gt[y, x, 0]) ** 2 + float(gt[y, x, 1]) ** 2)
                if epe > 3.0 and epe > 0.05 * mag:
                    out += valid[y, x]
                count += valid[y, x]
    return out / count


def sequence_loss_oracle(flows, gt, valid, gamma):
    """flows: list of (2,H,W); weight gamma^(N-1-k), masked mean |du|+|dv|."""
    n = len(flows)
    denom = max(float(valid.sum()), 1.0)
    total = 0.0
    h, w = valid.shape
    for k, f in enumerate(flows):
        term = 0.0
        for y in range(h):
            for x in range(w):
                if valid[y, x] > 0:
                    term += valid[y, x] * (
                        abs(float(f[0, y, x]) - float(gt[y, x, 0]))
                        + abs(float(f[1, y, x]) - float(gt[y, x, 1]))
                    )
        total += gamma ** (n - 1 - k) * term / denom
    return total


def adamw_single_step_oracle(p, g, lr, beta1, beta2, eps, wd):
    """Closed-form first AdamW step on a scalar (t=1 bias correction)."""
    m = (1 - beta1) * g
    v = (1 - beta2) * g * g
    mhat = m / (1 - beta1)
    vhat = v / (1 - beta2)
    return p - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p)
