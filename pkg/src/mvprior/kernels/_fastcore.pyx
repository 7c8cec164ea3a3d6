# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend: per-pixel loops for the windowed attention
aggregation, bilinear gather/scatter and forward-warp splatting.  Must agree
with mvprior.kernels.reference to float rounding."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor

BACKEND_NAME = "cython"

ctypedef fused floating:
    float
    double


def _dummy(dtype):
    return np.empty((2, 0, 0), dtype=dtype)


cdef _wa_fwd(floating[:, :, ::1] Q, floating[:, :, ::1] K,
             floating[:, :, ::1] Vm, floating[:, ::1] Cm,
             floating[:, :, ::1] Vp, floating[:, ::1] Cp,
             bint hasp, int d, double scale, double eps,
             floating[:, :, ::1] S, floating[:, :, ::1] out, floating[:, ::1] den_out):
    # Q and K are channel-last (H,W,C); everything else channel-first
    cdef Py_ssize_t H = Q.shape[0], W = Q.shape[1], C = Q.shape[2]
    cdef Py_ssize_t i, j, k, l, ii, jj, o, c
    cdef Py_ssize_t side = 2 * d + 1, n = side * side
    cdef double z, m, se, s, wm, wp, num0, num1, den
    cdef double[::1] zbuf = np.empty(n, dtype=np.float64)
    for i in range(H):
        for j in range(W):
            m = -1e300
            o = 0
            for k in range(-d, d + 1):
                ii = i + k
                for l in range(-d, d + 1):
                    jj = j + l
                    if 0 <= ii < H and 0 <= jj < W:
                        z = 0.0
                        for c in range(C):
                            z += Q[i, j, c] * K[ii, jj, c]
                        z *= scale
                        zbuf[o] = z
                        if z > m:
                            m = z
                    else:
                        zbuf[o] = -1e300
                    o += 1
            se = 0.0
            for o in range(n):
                if zbuf[o] > -1e299:
                    zbuf[o] = exp(zbuf[o] - m)
                    se += zbuf[o]
                else:
                    zbuf[o] = 0.0
            num0 = 0.0
            num1 = 0.0
            den = 0.0
            o = 0
            for k in range(-d, d + 1):
                ii = i + k
                for l in range(-d, d + 1):
                    jj = j + l
                    s = zbuf[o] / se
                    S[o, i, j] = <floating> s
                    if s != 0.0 and 0 <= ii < H and 0 <= jj < W:
                        wm = s * Cm[ii, jj]
                        num0 += wm * Vm[0, ii, jj]
                        num1 += wm * Vm[1, ii, jj]
                        den += wm
                        if hasp:
                            wp = s * Cp[ii, jj]
                            num0 += wp * Vp[0, ii, jj]
                            num1 += wp * Vp[1, ii, jj]
                            den += wp
                    o += 1
            out[0, i, j] = <floating> (num0 / (den + eps))
            out[1, i, j] = <floating> (num1 / (den + eps))
            den_out[i, j] = <floating> den


cdef _wa_bwd(floating[:, :, ::1] g, floating[:, :, ::1] S,
             floating[:, :, ::1] out, floating[:, ::1] den,
             floating[:, :, ::1] Q, floating[:, :, ::1] K,
             floating[:, :, ::1] Vm, floating[:, ::1] Cm,
             floating[:, :, ::1] Vp, floating[:, ::1] Cp,
             bint hasp, int d, double scale, double eps,
             floating[:, :, ::1] dQ, floating[:, :, ::1] dK,
             floating[:, :, ::1] dVm, floating[:, ::1] dCm,
             floating[:, :, ::1] dVp, floating[:, ::1] dCp):
    # Q, K, dQ, dK are channel-last (H,W,C)
    cdef Py_ssize_t H = Q.shape[0], W = Q.shape[1], C = Q.shape[2]
    cdef Py_ssize_t i, j, k, l, ii, jj, o, c
    cdef Py_ssize_t side = 2 * d + 1, n = side * side
    cdef double inv, gx, gy, gF, dwm, dwp, s, dso, sum_sds, dz
    cdef double[::1] dsbuf = np.empty(n, dtype=np.float64)
    for i in range(H):
        for j in range(W):
            inv = 1.0 / (den[i, j] + eps)
            gx = g[0, i, j]
            gy = g[1, i, j]
            gF = (gx * out[0, i, j] + gy * out[1, i, j]) * inv
            sum_sds = 0.0
            o = 0
            for k in range(-d, d + 1):
                ii = i + k
                for l in range(-d, d + 1):
                    jj = j + l
                    s = S[o, i, j]
                    if 0 <= ii < H and 0 <= jj < W:
                        dwm = (gx * Vm[0, ii, jj] + gy * Vm[1, ii, jj]) * inv - gF
                        dso = dwm * Cm[ii, jj]
                        dCm[ii, jj] += <floating> (s * dwm)
                        dVm[0, ii, jj] += <floating> (s * Cm[ii, jj] * gx * inv)
                        dVm[1, ii, jj] += <floating> (s * Cm[ii, jj] * gy * inv)
                        if hasp:
                            dwp = (gx * Vp[0, ii, jj] + gy * Vp[1, ii, jj]) * inv - gF
                            dso += dwp * Cp[ii, jj]
                            dCp[ii, jj] += <floating> (s * dwp)
                            dVp[0, ii, jj] += <floating> (s * Cp[ii, jj] * gx * inv)
                            dVp[1, ii, jj] += <floating> (s * Cp[ii, jj] * gy * inv)
                    else:
                        dso = 0.0
                    dsbuf[o] = dso
                    sum_sds += s * dso
                    o += 1
            o = 0
            for k in range(-d, d + 1):
                ii = i + k
                for l in range(-d, d + 1):
                    jj = j + l
                    s = S[o, i, j]
                    if s != 0.0 and 0 <= ii < H and 0 <= jj < W:
                        dz = s * (dsbuf[o] - sum_sds) * scale
                        for c in range(C):
                            dQ[i, j, c] += <floating> (dz * K[ii, jj, c])
                            dK[ii, jj, c] += <floating> (dz * Q[i, j, c])
                    o += 1


def _window_attention_fwd_impl(floating[:, :, ::1] Q, floating[:, :, ::1] K,
                               floating[:, :, ::1] Vm, floating[:, ::1] Cm,
                               floating[:, :, ::1] Vp, floating[:, ::1] Cp,
                               bint hasp, int d, double scale, double eps):
    # Q, K arrive channel-last
    dt = np.asarray(Q).dtype
    side = 2 * d + 1
    S_arr = np.empty((side * side, Q.shape[0], Q.shape[1]), dtype=dt)
    out_arr = np.empty((2, Q.shape[0], Q.shape[1]), dtype=dt)
    den_arr = np.empty((Q.shape[0], Q.shape[1]), dtype=dt)
    cdef floating[:, :, ::1] S = S_arr
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, ::1] den = den_arr
    _wa_fwd(Q, K, Vm, Cm, Vp, Cp, hasp, d, scale, eps, S, out, den)
    return S_arr, out_arr, den_arr


def _window_attention_bwd_impl(floating[:, :, ::1] g, floating[:, :, ::1] S,
                               floating[:, :, ::1] out, floating[:, ::1] den,
                               floating[:, :, ::1] Q, floating[:, :, ::1] K,
                               floating[:, :, ::1] Vm, floating[:, ::1] Cm,
                               floating[:, :, ::1] Vp, floating[:, ::1] Cp,
                               bint hasp, int d, double scale, double eps):
    dQ_arr = np.zeros_like(np.asarray(Q))
    dK_arr = np.zeros_like(np.asarray(K))
    dVm_arr = np.zeros_like(np.asarray(Vm))
    dCm_arr = np.zeros_like(np.asarray(Cm))
    dVp_arr = np.zeros_like(np.asarray(Vp))
    dCp_arr = np.zeros_like(np.asarray(Cp))
    cdef floating[:, :, ::1] dQ = dQ_arr
    cdef floating[:, :, ::1] dK = dK_arr
    cdef floating[:, :, ::1] dVm = dVm_arr
    cdef floating[:, ::1] dCm = dCm_arr
    cdef floating[:, :, ::1] dVp = dVp_arr
    cdef floating[:, ::1] dCp = dCp_arr
    _wa_bwd(g, S, out, den, Q, K, Vm, Cm, Vp, Cp, hasp, d, scale, eps,
            dQ, dK, dVm, dCm, dVp, dCp)
    return dQ_arr, dK_arr, dVm_arr, dCm_arr, dVp_arr, dCp_arr


# ---------------------------------------------------------------------------
# bilinear gather / scatter


def _gather_fwd_impl(floating[:, :, ::1] imgT, floating[::1] x, floating[::1] y,
                     bint clamp):
    # imgT is channel-last (H,W,C) so each corner read is a contiguous run
    cdef Py_ssize_t H = imgT.shape[0], W = imgT.shape[1], C = imgT.shape[2]
    cdef Py_ssize_t N = x.shape[0]
    out_arr = np.zeros((N, C), dtype=np.asarray(imgT).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, x0, y0, xi, yi, dxc, dyc
    cdef double xx, yy, fx, fy, w
    for p in range(N):
        xx = x[p]
        yy = y[p]
        if clamp:
            if xx < 0.0:
                xx = 0.0
            elif xx > W - 1.0:
                xx = W - 1.0
            if yy < 0.0:
                yy = 0.0
            elif yy > H - 1.0:
                yy = H - 1.0
        x0 = <Py_ssize_t> floor(xx)
        y0 = <Py_ssize_t> floor(yy)
        fx = xx - floor(xx)
        fy = yy - floor(yy)
        for dyc in range(2):
            yi = y0 + dyc
            if yi < 0 or yi >= H:
                continue
            for dxc in range(2):
                xi = x0 + dxc
                if xi < 0 or xi >= W:
                    continue
                w = (fx if dxc else 1.0 - fx) * (fy if dyc else 1.0 - fy)
                for c in range(C):
                    out[p, c] += <floating> (imgT[yi, xi, c] * w)
    return out_arr


def _gather_bwd_impl(floating[:, :, ::1] imgT, floating[::1] x, floating[::1] y,
                     floating[:, ::1] dvalT, bint clamp, bint need_dpos):
    # imgT, dvalT and the returned dimgT are channel-last
    cdef Py_ssize_t H = imgT.shape[0], W = imgT.shape[1], C = imgT.shape[2]
    cdef Py_ssize_t N = x.shape[0]
    dt = np.asarray(imgT).dtype
    dimg_arr = np.zeros((H, W, C), dtype=dt)
    dx_arr = np.zeros(N, dtype=dt)
    dy_arr = np.zeros(N, dtype=dt)
    cdef floating[:, :, ::1] dimg = dimg_arr
    cdef floating[::1] dx = dx_arr
    cdef floating[::1] dy = dy_arr
    cdef Py_ssize_t p, c, x0, y0, xi, yi, dxc, dyc
    cdef double xx, yy, fx, fy, wx, wy, gdot, sx, sy, w
    cdef bint inx, iny
    for p in range(N):
        xx = x[p]
        yy = y[p]
        inx = (xx > 0.0) and (xx < W - 1.0)
        iny = (yy > 0.0) and (yy < H - 1.0)
        if clamp:
            if xx < 0.0:
                xx = 0.0
            elif xx > W - 1.0:
                xx = W - 1.0
            if yy < 0.0:
                yy = 0.0
            elif yy > H - 1.0:
                yy = H - 1.0
        else:
            inx = True
            iny = True
        x0 = <Py_ssize_t> floor(xx)
        y0 = <Py_ssize_t> floor(yy)
        fx = xx - floor(xx)
        fy = yy - floor(yy)
        for dyc in range(2):
            yi = y0 + dyc
            if yi < 0 or yi >= H:
                continue
            wy = fy if dyc else 1.0 - fy
            sy = 1.0 if dyc else -1.0
            for dxc in range(2):
                xi = x0 + dxc
                if xi < 0 or xi >= W:
                    continue
                wx = fx if dxc else 1.0 - fx
                sx = 1.0 if dxc else -1.0
                w = wx * wy
                gdot = 0.0
                for c in range(C):
                    dimg[yi, xi, c] += <floating> (dvalT[p, c] * w)
                    gdot += dvalT[p, c] * imgT[yi, xi, c]
                if need_dpos:
                    if inx:
                        dx[p] += <floating> (gdot * sx * wy)
                    if iny:
                        dy[p] += <floating> (gdot * sy * wx)
    if need_dpos:
        return dimg_arr, dx_arr, dy_arr
    return dimg_arr, None, None


def _splat_impl(floating[:, ::1] val, floating[::1] x, floating[::1] y,
                Py_ssize_t H, Py_ssize_t W):
    # val is (N,C): one channel-last value row per splatted point
    cdef Py_ssize_t N = val.shape[0], C = val.shape[1]
    dt = np.asarray(val).dtype
    accT_arr = np.zeros((H, W, C), dtype=dt)
    wacc_arr = np.zeros((H, W), dtype=dt)
    cdef floating[:, :, ::1] accT = accT_arr
    cdef floating[:, ::1] wacc = wacc_arr
    cdef Py_ssize_t p, c, x0, y0, xi, yi, dxc, dyc
    cdef double fx, fy, w
    for p in range(N):
        x0 = <Py_ssize_t> floor(x[p])
        y0 = <Py_ssize_t> floor(y[p])
        fx = x[p] - floor(x[p])
        fy = y[p] - floor(y[p])
        for dyc in range(2):
            yi = y0 + dyc
            if yi < 0 or yi >= H:
                continue
            for dxc in range(2):
                xi = x0 + dxc
                if xi < 0 or xi >= W:
                    continue
                w = (fx if dxc else 1.0 - fx) * (fy if dyc else 1.0 - fy)
                wacc[yi, xi] += <floating> w
                for c in range(C):
                    accT[yi, xi, c] += <floating> (val[p, c] * w)
    return np.ascontiguousarray(accT_arr.transpose(2, 0, 1)), wacc_arr


# ---------------------------------------------------------------------------
# python-facing wrappers (match mvprior.kernels.reference signatures)


def window_attention_fwd(Q, K, Vm, Cm, Vp, Cp, d, scale, eps):
    hasp = Vp is not None
    if not hasp:
        Vp = _dummy(Q.dtype)
        Cp = np.empty((0, 0), dtype=Q.dtype)
    QT = np.ascontiguousarray(np.asarray(Q).transpose(1, 2, 0))
    KT = np.ascontiguousarray(np.asarray(K).transpose(1, 2, 0))
    S, out, den = _window_attention_fwd_impl(QT, KT, Vm, Cm, Vp, Cp, hasp, d, scale, eps)
    cache = (S, out, den, QT, KT, Vm, Cm, Vp if hasp else None, Cp if hasp else None)
    return out, cache


def window_attention_bwd(g, cache, d, scale, eps):
    S, out, den, QT, KT, Vm, Cm, Vp, Cp = cache
    hasp = Vp is not None
    if not hasp:
        Vp = _dummy(QT.dtype)
        Cp = np.empty((0, 0), dtype=QT.dtype)
    g = np.ascontiguousarray(g)
    dQT, dKT, dVm, dCm, dVp, dCp = _window_attention_bwd_impl(
        g, S, out, den, QT, KT, Vm, Cm, Vp, Cp, hasp, d, scale, eps
    )
    dQ = np.ascontiguousarray(dQT.transpose(2, 0, 1))
    dK = np.ascontiguousarray(dKT.transpose(2, 0, 1))
    if not hasp:
        dVp = dCp = None
    return dQ, dK, dVm, dCm, dVp, dCp


def bilinear_gather_fwd(img, x, y, mode):
    imgT = np.ascontiguousarray(np.asarray(img).transpose(1, 2, 0))
    return _gather_fwd_impl(
        imgT,
        np.ascontiguousarray(x),
        np.ascontiguousarray(y),
        mode == "clamp",
    )


def bilinear_gather_bwd(img, x, y, dval, mode, need_dpos):
    imgT = np.ascontiguousarray(np.asarray(img).transpose(1, 2, 0))
    dimgT, dx, dy = _gather_bwd_impl(
        imgT,
        np.ascontiguousarray(x),
        np.ascontiguousarray(y),
        np.ascontiguousarray(dval),
        mode == "clamp",
        bool(need_dpos),
    )
    dimg = np.ascontiguousarray(dimgT.transpose(2, 0, 1))
    return dimg, dx, dy


def bilinear_splat(val, x, y, H, W):
    return _splat_impl(
        np.ascontiguousarray(val),
        np.ascontiguousarray(x),
        np.ascontiguousarray(y),
        int(H),
        int(W),
    )
