"""Minimal reverse-mode automatic differentiation over numpy arrays.

Production dtype is float32; a float64 mode exists solely for gradient
checking (build parameters/inputs as float64 and every op follows).  Ops are
pure functions building a graph of `Tensor` nodes; `backward` walks the graph
from a scalar loss.  There is no implicit broadcasting: elementwise ops
require exactly matching shapes.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict

import numpy as np

from . import kernels
from .errors import NumericError

# Finite checks run after every op unless disabled (kept on by default; the
# training loop leaves them on, the cost is a vectorized scan).
finite_checks = True


class BranchGuard:
    """Records branch signatures (ReLU signs, bilinear cells) during gradient
    checking so finite-difference evaluations that cross a kink can be
    detected and excluded."""

    def __init__(self):
        self.active = False
        self.records = []
        self.kink_points = 0

    def begin(self):
        self.records = []
        self.kink_points = 0

    def record(self, arr):
        if self.active:
            self.records.append(zlib.crc32(np.ascontiguousarray(arr).tobytes()))

    def note_kinks(self, count):
        if self.active:
            self.kink_points += int(count)

    def signature(self):
        return tuple(self.records)


guard = BranchGuard()


def _check(data):
    if finite_checks and not np.isfinite(data).all():
        raise NumericError("non-finite value produced by an op")
    return data


class Tensor:
    """Dense n-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, name={self.name})"

    # light operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _result(data, parents):
    out = Tensor(_check(data))
    out._parents = tuple(parents)
    return out


def _needs(t):
    return t.requires_grad or t._bwd is not None


def _accum(t, g):
    if not _needs(t):
        return
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{opname}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def constant(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    _same_shape(a, b, "add")
    out = _result(a.data + b.data, (a, b))
    out._bwd = lambda g: (_accum(a, g), _accum(b, g))
    return out


def sub(a, b):
    _same_shape(a, b, "sub")
    out = _result(a.data - b.data, (a, b))
    out._bwd = lambda g: (_accum(a, g), _accum(b, -g))
    return out


def mul(a, b):
    _same_shape(a, b, "mul")
    out = _result(a.data * b.data, (a, b))
    out._bwd = lambda g: (_accum(a, g * b.data), _accum(b, g * a.data))
    return out


def scale(a, s):
    s = float(s)
    out = _result(a.data * np.asarray(s, dtype=a.data.dtype), (a,))
    out._bwd = lambda g: _accum(a, g * np.asarray(s, dtype=a.data.dtype))
    return out


def neg(a):
    return scale(a, -1.0)


def absolute(a):
    out = _result(np.abs(a.data), (a,))
    sign = np.sign(a.data)
    out._bwd = lambda g: _accum(a, g * sign)
    return out


def square(a):
    out = _result(a.data * a.data, (a,))
    out._bwd = lambda g: _accum(a, g * (2.0 * a.data))
    return out


def tsum(a):
    out = _result(np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(()), (a,))
    out._bwd = lambda g: _accum(a, np.full_like(a.data, g))
    return out


def tmean(a):
    return scale(tsum(a), 1.0 / a.data.size)


def concat_channels(tensors):
    """Concatenate (C_i, H, W) tensors along channel axis 0."""
    shapes = {t.data.shape[1:] for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"concat_channels: spatial shapes differ: {sorted(shapes)}")
    data = np.concatenate([t.data for t in tensors], axis=0)
    out = _result(data, tuple(tensors))
    splits = np.cumsum([t.data.shape[0] for t in tensors])[:-1]

    def bwd(g):
        for t, gi in zip(tensors, np.split(g, splits, axis=0)):
            _accum(t, gi)

    out._bwd = bwd
    return out


def squeeze0(a):
    """Drop a leading singleton axis: (1, ...) -> (...)."""
    if a.data.shape[0] != 1:
        raise ValueError(f"squeeze0: leading axis is {a.data.shape[0]}, not 1")
    out = _result(a.data[0], (a,))
    out._bwd = lambda g: _accum(a, g[None])
    return out


def slice_channels(a, start, stop):
    out = _result(a.data[start:stop].copy(), (a,))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# activations and softmax


def activate(a, kind):
    """Elementwise activation, kind in {'relu', 'sigmoid'}."""
    if kind == "relu":
        pos = a.data > 0
        if guard.active:
            guard.record(pos)
            guard.note_kinks(np.count_nonzero(np.abs(a.data) < 1e-7))
        out = _result(np.where(pos, a.data, 0), (a,))
        out._bwd = lambda g: _accum(a, g * pos)
        return out
    if kind == "sigmoid":
        # stable two-branch form; clamped to the dtype's resolution so the
        # output stays strictly inside (0,1) even at saturation
        x = a.data
        y = np.empty_like(x)
        p = x >= 0
        y[p] = 1.0 / (1.0 + np.exp(-x[p]))
        ex = np.exp(x[~p])
        y[~p] = ex / (1.0 + ex)
        eps = np.finfo(x.dtype).eps
        np.clip(y, eps, 1.0 - eps, out=y)
        out = _result(y, (a,))
        out._bwd = lambda g: _accum(a, g * (y * (1.0 - y)))
        return out
    raise ValueError(f"activate: unknown kind {kind!r}")


def relu(a):
    return activate(a, "relu")


def sigmoid(a):
    return activate(a, "sigmoid")


def softmax(a):
    """Softmax over a 1-D logits vector, max-subtracted for stability."""
    if a.data.ndim != 1 or a.data.size < 1:
        raise ValueError("softmax: expects a nonempty 1-D vector")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = _result(y, (a,))
    out._bwd = lambda g: _accum(a, y * (g - np.dot(g, y)))
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n, k, stride, dilation, padding):
    eff = dilation * (k - 1) + 1
    return (n + 2 * padding - eff) // stride + 1


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=None):
    """2-D cross-correlation: x (Cin,H,W), weight (Cout,Cin,kh,kw), bias (Cout,).

    Zero padding; padding=None picks dilation*(k-1)//2 so stride-1 convs
    preserve the spatial size.
    """
    Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = weight.data.shape
    if Cw != Cin:
        raise ValueError(f"conv2d: weight expects {Cw} input channels, got {Cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel dims must be odd")
    if bias is not None and bias.data.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({Cout},)")
    if padding is None:
        padding = dilation * (kh - 1) // 2
    Ho = _conv_out_size(H, kh, stride, dilation, padding)
    Wo = _conv_out_size(W, kw, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d: output would be empty")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (Cin, kh, kw, Ho, Wo),
        (s0, s1 * dilation, s2 * dilation, s1 * stride, s2 * stride),
    )
    cols = np.ascontiguousarray(view).reshape(Cin * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(Cout, Cin * kh * kw)
    y = (wmat @ cols).reshape(Cout, Ho, Wo)
    if bias is not None:
        y = y + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _result(y, parents)

    def bwd(g):
        g2 = g.reshape(Cout, Ho * Wo)
        if weight.requires_grad or weight._bwd is not None:
            _accum(weight, (g2 @ cols.T).reshape(weight.data.shape))
        if bias is not None and (bias.requires_grad or bias._bwd is not None):
            _accum(bias, g.sum(axis=(1, 2)))
        if x.requires_grad or x._bwd is not None:
            dcols = (wmat.T @ g2).reshape(Cin, kh, kw, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i * dilation
                for j in range(kw):
                    wj = j * dilation
                    dxp[
                        :,
                        hi : hi + (Ho - 1) * stride + 1 : stride,
                        wj : wj + (Wo - 1) * stride + 1 : stride,
                    ] += dcols[:, i, j]
            if padding:
                _accum(x, dxp[:, padding:-padding, padding:-padding])
            else:
                _accum(x, dxp)

    out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# windowed attention aggregation (kernel-backed)


def window_fused_aggregate(Q, K, Vm, Cm, Vp=None, Cp=None, d=3, eps=1e-8):
    """Credibility-weighted local window attention over flow values.

    Q, K: (C,H,W); Vm (2,H,W); Cm (H,W); optional second source Vp/Cp.
    Logits are dot products scaled by 1/sqrt(C); out-of-bounds taps are
    excluded.  Output is sum(W*V)/(sum(W)+eps) over both sources.
    """
    C, H, W = Q.data.shape
    if K.data.shape != Q.data.shape:
        raise ValueError("window_fused_aggregate: Q/K shape mismatch")
    if Vm.data.shape != (2, H, W) or Cm.data.shape != (H, W):
        raise ValueError("window_fused_aggregate: Vm/Cm shape mismatch")
    if (Vp is None) != (Cp is None):
        raise ValueError("window_fused_aggregate: Vp and Cp must be given together")
    if Vp is not None and (Vp.data.shape != (2, H, W) or Cp.data.shape != (H, W)):
        raise ValueError("window_fused_aggregate: Vp/Cp shape mismatch")
    if d < 1:
        raise ValueError("window_fused_aggregate: d must be >= 1")
    sc = 1.0 / np.sqrt(C)

    vp = Vp.data if Vp is not None else None
    cp = Cp.data if Cp is not None else None
    y, cache = kernels.window_attention_fwd(Q.data, K.data, Vm.data, Cm.data, vp, cp, d, sc, eps)

    parents = (Q, K, Vm, Cm) if Vp is None else (Q, K, Vm, Cm, Vp, Cp)
    out = _result(y, parents)

    def bwd(g):
        dQ, dK, dVm, dCm, dVp, dCp = kernels.window_attention_bwd(g, cache, d, sc, eps)
        _accum(Q, dQ)
        _accum(K, dK)
        _accum(Vm, dVm)
        _accum(Cm, dCm)
        if Vp is not None:
            _accum(Vp, dVp)
            _accum(Cp, dCp)

    out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# bilinear sampling ops (kernel-backed)


def local_correlation(f1, f2, flow, radius):
    """Local correlation volume: corr[o](p) = <f1(p), f2(p+flow(p)+o)>/sqrt(C)
    for all offsets |o|_inf <= radius, bilinear sampling, zero outside bounds.

    f1, f2: (C,h,w) tensors; flow: (2,h,w) in pixels at this scale.
    Returns ((2r+1)^2, h, w).
    """
    if radius < 1:
        raise ValueError("local_correlation: radius must be >= 1")
    C, h, w = f1.data.shape
    if f2.data.shape != f1.data.shape or flow.data.shape != (2, h, w):
        raise ValueError("local_correlation: shape mismatch")
    sc = 1.0 / np.sqrt(C)
    side = 2 * radius + 1
    n = side * side
    gy, gx = np.mgrid[0:h, 0:w].astype(f1.data.dtype)
    offs = np.stack(
        np.meshgrid(
            np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij"
        ),
        axis=-1,
    ).reshape(n, 2)  # (dy, dx) row-major
    px = (flow.data[0] + gx)[None] + offs[:, 1].astype(f1.data.dtype)[:, None, None]
    py = (flow.data[1] + gy)[None] + offs[:, 0].astype(f1.data.dtype)[:, None, None]
    xs = px.reshape(-1)
    ys = py.reshape(-1)
    if guard.active:
        guard.record(np.floor(xs))
        guard.record(np.floor(ys))
    hw = h * w
    # channel-last throughout: sampled is (n, h*w, C)
    sampled = kernels.bilinear_gather_fwd(f2.data, xs, ys, "zero").reshape(n, hw, C)
    f1T = f1.data.reshape(C, hw).T
    corr = (np.einsum("pc,npc->np", f1T, sampled) * np.asarray(sc, f1.dtype)).reshape(n, h, w)

    out = _result(corr, (f1, f2, flow))

    def bwd(g):
        gs = (g * np.asarray(sc, g.dtype)).reshape(n, hw)
        if _needs(f1):
            df1T = np.einsum("np,npc->pc", gs, sampled)
            _accum(f1, np.ascontiguousarray(df1T.T).reshape(C, h, w))
        need2 = _needs(f2)
        needf = _needs(flow)
        if need2 or needf:
            dsampled = (gs[:, :, None] * f1T[None]).reshape(n * hw, C)
            dimg, dxs, dys = kernels.bilinear_gather_bwd(
                f2.data, xs, ys, dsampled, "zero", needf
            )
            if need2:
                _accum(f2, dimg)
            if needf:
                dpx = dxs.reshape(n, h, w).sum(axis=0)
                dpy = dys.reshape(n, h, w).sum(axis=0)
                _accum(flow, np.stack([dpx, dpy]))

    out._bwd = bwd
    return out


def upsample_bilinear(a, factor):
    """Bilinear upsampling of (C,h,w) by an integer factor, half-pixel centers,
    clamped borders.  Values are not rescaled (see upsample_flow)."""
    C, h, w = a.data.shape
    H, W = h * factor, w * factor
    dt = a.data.dtype
    gy, gx = np.mgrid[0:H, 0:W]
    xs = ((gx.astype(dt) + 0.5) / factor - 0.5).reshape(-1)
    ys = ((gy.astype(dt) + 0.5) / factor - 0.5).reshape(-1)
    y_nc = kernels.bilinear_gather_fwd(a.data, xs, ys, "clamp")
    y = np.ascontiguousarray(y_nc.T).reshape(C, H, W)
    out = _result(y, (a,))

    def bwd(g):
        dimg, _, _ = kernels.bilinear_gather_bwd(
            a.data, xs, ys, np.ascontiguousarray(g.reshape(C, H * W).T), "clamp", False
        )
        _accum(a, dimg)

    out._bwd = bwd
    return out


def upsample_flow(a, factor):
    """Upsample a (2,h,w) flow by `factor`, scaling displacements by `factor`."""
    return scale(upsample_bilinear(a, factor), float(factor))


def avg_pool2d(a, factor):
    """Non-overlapping mean pooling of (C,H,W) by an integer factor."""
    C, H, W = a.data.shape
    if H % factor or W % factor:
        raise ValueError(f"avg_pool2d: {H}x{W} not divisible by {factor}")
    h, w = H // factor, W // factor
    y = a.data.reshape(C, h, factor, w, factor).mean(axis=(2, 4))
    out = _result(y, (a,))
    inv = 1.0 / (factor * factor)

    def bwd(g):
        gg = np.broadcast_to(
            (g * np.asarray(inv, g.dtype))[:, :, None, :, None], (C, h, factor, w, factor)
        )
        _accum(a, gg.reshape(C, H, W).copy())

    out._bwd = bwd
    return out


# ---------------------------------------------------------------------------
# graph walk


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode sweep from a scalar loss; fills .grad on reachable nodes."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


class ParamSet:
    """Insertion-ordered, uniquely named trainable tensors."""

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype):
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def copy(self):
        return self.astype(self._dtype())

    def _dtype(self):
        for t in self._params.values():
            return t.data.dtype
        return np.float32

    def load_arrays(self, arrays):
        """Overwrite parameter values from {name: ndarray}; names and shapes
        must match exactly."""
        if set(arrays) != set(self._params):
            missing = sorted(set(self._params) - set(arrays))
            extra = sorted(set(arrays) - set(self._params))
            raise ValueError(f"parameter name set mismatch: missing {missing}, extra {extra}")
        for name, t in self._params.items():
            a = np.asarray(arrays[name], dtype=t.data.dtype)
            if a.shape != t.data.shape:
                raise ValueError(f"parameter {name!r}: shape {a.shape} != {t.data.shape}")
            t.data = a.copy()


class GradTape:
    """Named-gradient collector for one forward/backward pass.

    The op graph itself is recorded on the tensors; the tape resolves it into
    a name -> gradient map for a ParamSet, with exact zeros for parameters
    unreachable from the loss.
    """

    def __init__(self, params):
        self.params = params
        self.grads = None

    def backward(self, loss):
        backward(loss)
        out = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        self.grads = out
        return out
