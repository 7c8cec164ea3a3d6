"""Pure-numpy kernel backend.

Vectorized implementations of the hot inner loops: credibility-weighted
windowed attention aggregation (forward and backward), bilinear gather and
its gradient, and bilinear forward-warp splatting.  The compiled backend in
``_fastcore.pyx`` implements the same entry points with per-pixel loops; both
must agree to float rounding.  All functions accept float32 or float64 arrays
and preserve the dtype.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"

NEG_INF = -1e30  # stand-in for -inf logits; exp() underflows to exactly 0


def _window_terms(Q, K, Cm, Vm, Cp, Vp, d, scale):
    """Shared forward plumbing: per-offset logits, shifted credibility/value
    windows and the in-bounds mask, each of shape (n_offsets, ...)."""
    C, H, W = Q.shape
    n = (2 * d + 1) ** 2
    logits = np.full((n, H, W), NEG_INF, dtype=Q.dtype)
    o = 0
    for k in range(-d, d + 1):
        for l in range(-d, d + 1):
            src_i = slice(max(0, -k), H - max(0, k))
            src_j = slice(max(0, -l), W - max(0, l))
            dst_i = slice(max(0, k), H + min(0, k))
            dst_j = slice(max(0, l), W + min(0, l))
            # logit at (i,j) for offset (k,l) pairs Q[i,j] with K[i+k,j+l]
            logits[o][src_i, src_j] = scale * np.einsum(
                "cij,cij->ij", Q[:, src_i, src_j], K[:, dst_i, dst_j]
            )
            o += 1
    return logits


def _shift_stack(A, d):
    """Stack A shifted by every window offset: out[o][i,j] = A[..., i+k, j+l]
    (zero outside bounds)."""
    H, W = A.shape[-2:]
    n = (2 * d + 1) ** 2
    out = np.zeros((n,) + A.shape, dtype=A.dtype)
    o = 0
    for k in range(-d, d + 1):
        for l in range(-d, d + 1):
            src_i = slice(max(0, -k), H - max(0, k))
            src_j = slice(max(0, -l), W - max(0, l))
            dst_i = slice(max(0, k), H + min(0, k))
            dst_j = slice(max(0, l), W + min(0, l))
            out[o][..., src_i, src_j] = A[..., dst_i, dst_j]
            o += 1
    return out


def _unshift_add(G, d):
    """Adjoint of _shift_stack: scatter per-offset grads back, returning an
    array shaped like G[0] (summed over offsets)."""
    H, W = G.shape[-2:]
    out = np.zeros(G.shape[1:], dtype=G.dtype)
    o = 0
    for k in range(-d, d + 1):
        for l in range(-d, d + 1):
            src_i = slice(max(0, -k), H - max(0, k))
            src_j = slice(max(0, -l), W - max(0, l))
            dst_i = slice(max(0, k), H + min(0, k))
            dst_j = slice(max(0, l), W + min(0, l))
            out[..., dst_i, dst_j] += G[o][..., src_i, src_j]
            o += 1
    return out


def window_attention_fwd(Q, K, Vm, Cm, Vp, Cp, d, scale, eps):
    """Credibility-weighted local attention aggregation.

    Q, K: (C,H,W); Vm, Vp: (2,H,W); Cm, Cp: (H,W).  Vp/Cp may be None for the
    single-source form.  Returns (out (2,H,W), cache for backward).
    """
    logits = _window_terms(Q, K, Cm, Vm, Cp, Vp, d, scale)
    m = logits.max(axis=0)
    S = np.exp(logits - m[None])
    S /= S.sum(axis=0)[None]

    Cm_w = _shift_stack(Cm, d)
    Vm_w = _shift_stack(Vm, d)  # (n, 2, H, W)
    Wm = S * Cm_w
    num = np.einsum("nij,ncij->cij", Wm, Vm_w)
    den = Wm.sum(axis=0)
    if Vp is not None:
        Cp_w = _shift_stack(Cp, d)
        Vp_w = _shift_stack(Vp, d)
        Wp = S * Cp_w
        num += np.einsum("nij,ncij->cij", Wp, Vp_w)
        den += Wp.sum(axis=0)
    out = num / (den + eps)[None]
    cache = (S, out, den, Q, K, Vm, Cm, Vp, Cp)
    return out, cache


def window_attention_bwd(g, cache, d, scale, eps):
    """Backward of window_attention_fwd.

    g: (2,H,W) upstream gradient.  Returns (dQ, dK, dVm, dCm, dVp, dCp);
    the last two are None for the single-source form.
    """
    S, out, den, Q, K, Vm, Cm, Vp, Cp = cache
    inv = 1.0 / (den + eps)
    g_scaled = g * inv[None]  # dL/d(num)
    gF = np.einsum("cij,cij->ij", g, out) * inv  # dL/d(den) = -(g.F)/D

    Vm_w = _shift_stack(Vm, d)
    Cm_w = _shift_stack(Cm, d)
    # dL/dw_o = g.(V(p+o) - F)/D
    dWm = np.einsum("cij,ncij->nij", g_scaled, Vm_w) - gF[None]
    dS = dWm * Cm_w
    dCm = _unshift_add(S * dWm, d)
    dVm = _unshift_add(S[:, None] * Cm_w[:, None] * g_scaled[None], d)
    if Vp is not None:
        Vp_w = _shift_stack(Vp, d)
        Cp_w = _shift_stack(Cp, d)
        dWp = np.einsum("cij,ncij->nij", g_scaled, Vp_w) - gF[None]
        dS += dWp * Cp_w
        dCp = _unshift_add(S * dWp, d)
        dVp = _unshift_add(S[:, None] * Cp_w[:, None] * g_scaled[None], d)
    else:
        dVp = dCp = None

    # softmax backward: dz = S * (dS - sum_o S_o dS_o)
    dz = S * (dS - np.einsum("nij,nij->ij", S, dS)[None])
    # z_o = scale * Q(p).K(p+o)
    K_w = _shift_stack(K, d)  # (n, C, H, W)
    dQ = scale * np.einsum("nij,ncij->cij", dz, K_w)
    dK = _unshift_add(scale * dz[:, None] * Q[None], d)
    return dQ, dK, dVm, dCm, dVp, dCp


def _corner_data(x, y, H, W):
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    return x0.astype(np.int64), y0.astype(np.int64), fx, fy


def bilinear_gather_fwd(img, x, y, mode):
    """Sample img (C,H,W) at continuous points (x, y), length-N vectors.

    mode 'zero': out-of-bounds taps contribute 0; mode 'clamp': coordinates
    clamped to the border.  Returns (N,C) samples (channel-last points).
    """
    C, H, W = img.shape
    if mode == "clamp":
        x = np.clip(x, 0.0, W - 1.0)
        y = np.clip(y, 0.0, H - 1.0)
    x0, y0, fx, fy = _corner_data(x, y, H, W)
    imgT = img.reshape(C, H * W).T
    out = np.zeros((x.shape[0], C), dtype=img.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = np.where(ok)[0]
            if idx.size:
                out[idx] += imgT[yi[idx] * W + xi[idx]] * w[idx, None]
    return out


def bilinear_gather_bwd(img, x, y, dval, mode, need_dpos):
    """Backward of bilinear_gather_fwd.

    dval: (N,C).  Returns (dimg (C,H,W), dx (N,), dy (N,)); dx/dy are None
    when need_dpos is false.  Position gradients are zero where clamping was
    active or the footprint is fully out of bounds.
    """
    C, H, W = img.shape
    N = x.shape[0]
    if mode == "clamp":
        inside_x = (x > 0.0) & (x < W - 1.0)
        inside_y = (y > 0.0) & (y < H - 1.0)
        x = np.clip(x, 0.0, W - 1.0)
        y = np.clip(y, 0.0, H - 1.0)
    else:
        inside_x = np.ones(N, dtype=bool)
        inside_y = np.ones(N, dtype=bool)
    x0, y0, fx, fy = _corner_data(x, y, H, W)
    imgT = img.reshape(C, H * W).T
    dimgT = np.zeros((H * W, C), dtype=img.dtype)
    dx = np.zeros(N, dtype=img.dtype) if need_dpos else None
    dy_ = np.zeros(N, dtype=img.dtype) if need_dpos else None
    for dyc in (0, 1):
        for dxc in (0, 1):
            xi = x0 + dxc
            yi = y0 + dyc
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = np.where(ok)[0]
            if not idx.size:
                continue
            wx = fx[idx] if dxc else 1.0 - fx[idx]
            wy = fy[idx] if dyc else 1.0 - fy[idx]
            lin = yi[idx] * W + xi[idx]
            contrib = dval[idx] * (wx * wy)[:, None]
            np.add.at(dimgT, lin, contrib)  # deterministic unbuffered scatter
            if need_dpos:
                vals = imgT[lin]
                gdot = np.einsum("nc,nc->n", dval[idx], vals)
                sx = (1.0 if dxc else -1.0) * wy
                sy = (1.0 if dyc else -1.0) * wx
                dx[idx] += gdot * sx * inside_x[idx]
                dy_[idx] += gdot * sy * inside_y[idx]
    return np.ascontiguousarray(dimgT.T).reshape(C, H, W), dx, dy_


def bilinear_splat(val, x, y, H, W):
    """Scatter val (N,C) with unit weights to continuous targets (x, y).

    Returns (acc (C,H,W), wacc (H,W)).  Splats whose 4-corner footprint falls
    outside the frame lose the out-of-bounds share of their mass.
    """
    C = val.shape[1]
    x0, y0, fx, fy = _corner_data(x, y, H, W)
    accT = np.zeros((H * W, C), dtype=val.dtype)
    wacc = np.zeros(H * W, dtype=val.dtype)
    for dyc in (0, 1):
        for dxc in (0, 1):
            xi = x0 + dxc
            yi = y0 + dyc
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = np.where(ok)[0]
            if not idx.size:
                continue
            wx = fx[idx] if dxc else 1.0 - fx[idx]
            wy = fy[idx] if dyc else 1.0 - fy[idx]
            w = wx * wy
            lin = yi[idx] * W + xi[idx]
            wacc += np.bincount(lin, weights=w, minlength=H * W).astype(val.dtype)
            np.add.at(accT, lin, val[idx] * w[:, None])
    return np.ascontiguousarray(accT.T).reshape(C, H, W), wacc.reshape(H, W)
