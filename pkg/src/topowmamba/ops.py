"""The closed operator set. Each op computes its forward in numpy and registers
an explicit backward rule on the active tape.

Broadcasting is deliberately absent: binary ops need equal shapes or a python
scalar, biases are added inside ``linear``/``conv2d``, and anything else goes
through :func:`expand`.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import Tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _is_scalar(v) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return record("add_scalar", [a], a.data + b, lambda g: (g,))
    _same_shape("add", a, b)
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return record("add_scalar", [a], a.data - b, lambda g: (g,))
    _same_shape("sub", a, b)
    return record("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return record("neg", [a], -a.data, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return record("mul_scalar", [a], a.data * b, lambda g: (g * b,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return record("mul_scalar", [a], a.data / b, lambda g: (g / b,))
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", [a, b], out, lambda g: (g / bd, -g * out / bd))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(x.data)
    return record("exp", [x], out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise ValueError("log: non-positive input")
    return record("log", [x], np.log(xd), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", [x], np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return record("sigmoid", [x], s, lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    return record("silu", [x], xd * s, lambda g: (g * (s * (1 + xd * (1 - s))),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return record("softplus", [x], out, lambda g: (g * _sigmoid_np(xd),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1 + 3 * _GELU_C * xd ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return record("gelu", [x], out, bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return record("softmax", [x], s, lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis (stable route to cross-entropy)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", [x], out, bw)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", [x], out, bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("permute", [x], np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record("concat", list(xs), np.concatenate([t.data for t in xs], axis=axis), bw)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if len(shape) != x.ndim:
        raise ValueError(f"expand: rank mismatch {x.shape} -> {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    for i in axes:
        if x.shape[i] != 1:
            raise ValueError(f"expand: axis {i} has extent {x.shape[i]}, expected 1")
    out = np.broadcast_to(x.data, shape).copy()
    return record("expand", [x], out, lambda g: (g.sum(axis=axes, keepdims=True),))


def gather(x: Tensor, index, axis: int, inverse=None) -> Tensor:
    """Select entries of ``x`` along ``axis`` by an integer index map.

    When ``inverse`` is supplied the index is a permutation and the backward
    pass is another gather instead of a scatter-add.
    """
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)
    shape = x.shape

    def bw(g):
        if inverse is not None:
            return (np.take(g, inverse, axis=axis),)
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return record("gather", [x], out, bw)


# ---------------------------------------------------------------- layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w.T + b``."""
    d_out, d_in = w.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear: last axis {x.shape[-1]} != weight in-features {d_in}")
    if b is not None and b.shape != (d_out,):
        raise ValueError(f"linear: bias shape {b.shape} != ({d_out},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, d_in)
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return record("linear", inputs, out, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if c == 0:
        raise ValueError("layer_norm: empty channel axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, c).sum(axis=0)
        gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return record("layer_norm", [x, gamma, beta], out, bw)


_CONV_TILE_BYTES = 1 << 18


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Direct zero-padded cross-correlation.

    The forward accumulates one (input channel, kernel row, kernel column) tap at
    a time in that order, so each output equals a naive scalar loop bit for bit.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, c_in, h, wd_ = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if kh < 1 or kw < 1 or stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d: invalid kernel/stride/padding/groups")
    if c_in != c_in_g * groups or c_out % groups:
        raise ValueError(f"conv2d: channels {c_in}->{c_out} incompatible with weight {w.shape} "
                         f"and groups={groups}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd_ + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d: non-positive output extent ({h_out}, {w_out})")

    s, p, g_ = stride, padding, groups
    c_out_g = c_out // g_
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    xg = xp.reshape(n, g_, c_in_g, hp, wp)
    wg = w.data.reshape(g_, c_out_g, c_in_g, kh, kw)
    rh = s * (h_out - 1) + 1
    rw = s * (w_out - 1) + 1

    dtype = np.result_type(x.data, w.data)
    acc = np.zeros((n, g_, c_out_g, h_out, w_out), dtype=dtype)
    wcols = np.ascontiguousarray(wg.transpose(2, 3, 4, 0, 1))[..., None, None].astype(dtype)
    # Output rows are processed in tiles small enough to stay in cache; within a
    # tile every output still accumulates its taps in (ci, kh, kw) order.
    row_bytes = n * c_out * w_out * acc.itemsize
    tile = int(max(1, min(h_out, _CONV_TILE_BYTES // max(1, row_bytes))))
    for r0 in range(0, h_out, tile):
        r1 = min(h_out, r0 + tile)
        acc_t = acc[:, :, :, r0:r1]
        buf = np.empty_like(acc_t)
        span = s * (r1 - r0 - 1) + 1
        for ci in range(c_in_g):
            for i in range(kh):
                y0 = r0 * s + i
                for j in range(kw):
                    tap = xg[:, :, ci, y0:y0 + span:s, j:j + rw:s]
                    np.multiply(wcols[ci, i, j], tap[:, :, None], out=buf)
                    np.add(acc_t, buf, out=acc_t)
    out = acc.reshape(n, c_out, h_out, w_out)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(gout):
        m = h_out * w_out
        # im2col: (G, N*Ho*Wo, Cin_g*kh*kw)
        win = np.lib.stride_tricks.sliding_window_view(xg, (kh, kw), axis=(3, 4))
        win = win[:, :, :, ::s, ::s][:, :, :, :h_out, :w_out]  # N,G,Cin_g,Ho,Wo,kh,kw
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(g_, n * m, c_in_g * kh * kw)
        gg = gout.reshape(n, g_, c_out_g, m).transpose(1, 2, 0, 3).reshape(g_, c_out_g, n * m)
        gw = (gg @ cols).reshape(w.shape)
        gcols = (gg.transpose(0, 2, 1) @ wg.reshape(g_, c_out_g, -1))
        gcols = gcols.reshape(g_, n, h_out, w_out, c_in_g, kh, kw)
        gxp = np.zeros((n, g_, c_in_g, hp, wp), dtype=gcols.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, :, i:i + rh:s, j:j + rw:s] += gcols[..., i, j].transpose(1, 0, 4, 2, 3)
        gx = gxp.reshape(n, c_in, hp, wp)
        if p:
            gx = gx[:, :, p:p + h, p:p + wd_]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, w] if b is None else [x, w, b]
    return record("conv2d", inputs, out, bw)


_POOL_KINDS = ("global_max", "global_avg", "channel_max", "channel_mean")


def pool_reduce(x: Tensor, kind: str) -> Tensor:
    """Global spatial (N,C,1,1) or channel-axis (N,1,H,W) max/mean reduction.

    Max routes its gradient to the first maximal index on ties.
    """
    if kind not in _POOL_KINDS:
        raise ValueError(f"pool_reduce: unknown kind {kind!r}")
    if x.ndim != 4:
        raise ValueError(f"pool_reduce: expected N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    if kind.startswith("global"):
        if h * w == 0:
            raise ValueError("pool_reduce: empty spatial axes")
        flat = x.data.reshape(n, c, h * w)
        if kind == "global_avg":
            out = flat.mean(axis=2).reshape(n, c, 1, 1)
            return record(kind, [x], out,
                          lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

        def bw_gmax(g):
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
            return (gx.reshape(x.shape),)

        return record(kind, [x], out, bw_gmax)

    if c == 0:
        raise ValueError("pool_reduce: empty channel axis")
    if kind == "channel_mean":
        out = x.data.mean(axis=1, keepdims=True)
        return record(kind, [x], out, lambda g: (np.broadcast_to(g / c, x.shape).copy(),))
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw_cmax(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return record(kind, [x], out, bw_cmax)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic linear-interpolation matrix, align_corners=False convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def resample2d(x: Tensor, scale: int = 2, mode: str = "nearest") -> Tensor:
    """Integer x2 up-sampling of an N,C,H,W tensor."""
    if scale != 2:
        raise ValueError("resample2d: only scale=2 is supported")
    if x.ndim != 4:
        raise ValueError(f"resample2d: expected N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
        return record("resample_nearest", [x], out,
                      lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))
    if mode == "bilinear":
        mh = interp_matrix(h, 2 * h, x.dtype)
        mw = interp_matrix(w, 2 * w, x.dtype)
        out = mh @ x.data @ mw.T
        return record("resample_bilinear", [x], out, lambda g: (mh.T @ g @ mw,))
    raise ValueError(f"resample2d: unknown mode {mode!r}")
