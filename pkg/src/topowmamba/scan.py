"""2D scan orders, expand/merge, and the selective state-space (S6) recurrence."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import ops
from .autograd import Tensor, active_tape, record
from .nn import Linear, Module, Parameter

CONVENTIONAL = ("v1", "v2", "v3", "v4")
SERPENTINE = ("s1", "s2", "s3", "s4")
DIRECTION_SETS = {"conventional": CONVENTIONAL, "serpentine": SERPENTINE}
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class ScanOrder:
    direction: str
    forward_index: np.ndarray  # forward_index[t] = grid index visited at step t
    inverse_index: np.ndarray
    h: int
    w: int

    @property
    def length(self) -> int:
        return self.h * self.w


@lru_cache(maxsize=512)
def build_scan_order(h: int, w: int, direction: str) -> ScanOrder:
    """Flatten an h x w grid (row-major ids) along one of eight paths.

    v1 row-major, v2 column-major, s1 rows alternating left/right, s2 columns
    alternating down/up; v3, v4, s3, s4 traverse v1, v2, s1, s2 backwards.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be positive, got {h}x{w}")
    if direction not in CONVENTIONAL + SERPENTINE:
        raise ValueError(f"unknown scan direction {direction!r}")
    grid = np.arange(h * w, dtype=np.intp).reshape(h, w)
    # v3/v4/s3/s4 are v1/v2/s1/s2 reversed
    base = direction[0] + ("1" if direction[1] in "13" else "2")
    if base == "v1":
        fwd = grid.ravel()
    elif base == "v2":
        fwd = grid.T.ravel()
    elif base == "s1":
        g = grid.copy()
        g[1::2] = g[1::2, ::-1]
        fwd = g.ravel()
    else:  # s2
        g = grid.T.copy()
        g[1::2] = g[1::2, ::-1]
        fwd = g.ravel()
    if direction in ("v3", "v4", "s3", "s4"):
        fwd = fwd[::-1]
    fwd = np.ascontiguousarray(fwd)
    inv = np.empty_like(fwd)
    inv[fwd] = np.arange(fwd.size, dtype=np.intp)
    fwd.setflags(write=False)
    inv.setflags(write=False)
    return ScanOrder(direction, fwd, inv, h, w)


def orders_for(h: int, w: int, direction_set: str) -> list[ScanOrder]:
    try:
        names = DIRECTION_SETS[direction_set]
    except KeyError:
        raise ValueError(f"unknown direction set {direction_set!r}") from None
    return [build_scan_order(h, w, d) for d in names]


def _flatten(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 3, 1)), (n, h * w, c))


def expand(x: Tensor, orders: Sequence[ScanOrder]) -> list[Tensor]:
    """N,C,H,W map -> one N,L,C sequence per order."""
    n, c, h, w = x.shape
    for o in orders:
        if (o.h, o.w) != (h, w):
            raise ValueError(f"order {o.direction} built for {o.h}x{o.w}, map is {h}x{w}")
    flat = _flatten(x)
    return [ops.gather(flat, o.forward_index, axis=1, inverse=o.inverse_index) for o in orders]


def merge(seqs: Sequence[Tensor], orders: Sequence[ScanOrder]) -> Tensor:
    """Scatter each sequence back to grid order and sum over orders -> N,C,H,W."""
    if len(seqs) != len(orders) or not seqs:
        raise ValueError("merge: need one sequence per order")
    h, w = orders[0].h, orders[0].w
    total = None
    for seq, o in zip(seqs, orders):
        if seq.ndim != 3 or seq.shape[1] != o.length or (o.h, o.w) != (h, w):
            raise ValueError(f"merge: sequence {seq.shape} does not fit order {o.direction} "
                             f"({o.h}x{o.w})")
        back = ops.gather(seq, o.inverse_index, axis=1, inverse=o.forward_index)
        total = back if total is None else ops.add(total, back)
    n, _, c = total.shape
    return ops.permute(ops.reshape(total, (n, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------- S6

class S6Params(Module):
    """Selective SSM parameters for one scan: A = -exp(a_log), skip D, and the
    input projections producing delta (softplus), B and C."""

    def __init__(self, d_inner: int, rng: np.random.Generator, n_state: int = 16,
                 dt_rank: int | None = None, dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.n_state = n_state
        self.dt_rank = dt_rank or max(1, math.ceil(d_inner / 16))
        self.a_log = Parameter(np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64),
                                              (d_inner, 1))))
        self.d_skip = Parameter(np.ones(d_inner))
        self.dt_in = Linear(d_inner, self.dt_rank, rng, bias=False)
        self.dt_proj = Linear(self.dt_rank, d_inner, rng)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
        self.dt_proj.bias.data = (dt + np.log(-np.expm1(-dt))).astype(np.float32)  # softplus^-1
        self.b_proj = Linear(d_inner, n_state, rng, bias=False)
        self.c_proj = Linear(d_inner, n_state, rng, bias=False)

    def project(self, seq: Tensor):
        delta = ops.softplus(self.dt_proj(self.dt_in(seq)))
        return delta, self.b_proj(seq), self.c_proj(seq)

    def a_matrix(self) -> Tensor:
        return ops.neg(ops.exp(self.a_log))


def selective_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor,
                   d_skip: Tensor) -> Tensor:
    """Fused grouped recurrence.

    Shapes: x, delta (G,N,L,D); a (G,D,S); b, c (G,N,L,S); d_skip (G,D). Per
    group g, batch n, channel d and state s:

        h_t = exp(delta_t a) * h_{t-1} + delta_t b_t x_t,   h_0 = 0
        y_t = sum_s c_t h_t + d_skip x_t
    """
    xd, dd, ad, bd, cd, skip = (t.data for t in (x, delta, a, b, c, d_skip))
    g_, n, length, d = xd.shape
    s = ad.shape[-1]
    if dd.shape != xd.shape or ad.shape != (g_, d, s) or bd.shape != (g_, n, length, s) \
            or cd.shape != bd.shape or skip.shape != (g_, d):
        raise ValueError("selective_scan: inconsistent shapes "
                         f"x{xd.shape} delta{dd.shape} a{ad.shape} b{bd.shape} "
                         f"c{cd.shape} d{skip.shape}")
    if (dd <= 0).any():
        raise ValueError("selective_scan: delta must be positive")

    track = active_tape() is not None and any(t.requires_grad for t in (x, delta, a, b, c, d_skip))
    dtype = np.result_type(xd, dd, ad, bd, cd, skip)
    a_b = ad[:, None, None]  # G,1,1,D,S
    dx = dd * xd
    h = np.zeros((g_, n, d, s), dtype=dtype)
    hs = np.empty((g_, n, length, d, s), dtype=dtype) if track else None
    y = np.empty((g_, n, length, d), dtype=dtype)
    # without a tape only one chunk of states is alive at a time
    chunk = length if track else max(1, min(length, _CHUNK_ELEMS // max(1, g_ * n * d * s)))
    for start in range(0, length, chunk):
        sl = slice(start, min(start + chunk, length))
        decay = np.exp(dd[:, :, sl, :, None] * a_b)
        u = dx[:, :, sl, :, None] * bd[:, :, sl, None, :]
        buf = hs[:, :, sl] if track else np.empty_like(u)
        for k in range(u.shape[2]):
            h = decay[:, :, k] * h + u[:, :, k]
            buf[:, :, k] = h
        y[:, :, sl] = (buf @ cd[:, :, sl, :, None])[..., 0]
    y += xd * skip[:, None, None, :]

    def bw(gy):
        decay = np.exp(dd[..., None] * a_b)
        gy_c = gy[..., None] * cd[:, :, :, None, :]
        ghs = np.empty_like(hs)
        gh = gy_c[:, :, length - 1]
        ghs[:, :, length - 1] = gh
        for t in range(length - 2, -1, -1):
            gh = gh * decay[:, :, t + 1] + gy_c[:, :, t]
            ghs[:, :, t] = gh
        h_prev = np.zeros_like(hs)
        h_prev[:, :, 1:] = hs[:, :, :-1]
        gexp = ghs * h_prev * decay
        gh_b = (ghs @ bd[..., None])[..., 0]  # G,N,L,D
        gdelta = (gexp * a_b).sum(axis=-1) + gh_b * xd
        ga = (gexp * dd[..., None]).sum(axis=(1, 2))
        gb = (dx[:, :, :, None, :] @ ghs)[..., 0, :]
        gc = (gy[:, :, :, None, :] @ hs)[..., 0, :]
        gx = gy * skip[:, None, None, :] + gh_b * dd
        gskip = (gy * xd).sum(axis=(1, 2))
        return gx, gdelta, ga, gb, gc, gskip

    return record("selective_scan", [x, delta, a, b, c, d_skip], y, bw)


def _stack(ts: Sequence[Tensor]) -> Tensor:
    return ops.concat([ops.reshape(t, (1,) + t.shape) for t in ts], axis=0)


def _unstack(t: Tensor) -> list[Tensor]:
    g_ = t.shape[0]
    rest = t.shape[1:]
    return [ops.reshape(ops.gather(t, [k], axis=0), rest) for k in range(g_)]


def scan_group(seqs: Sequence[Tensor], params: Sequence[S6Params]) -> list[Tensor]:
    """Run one S6 per (sequence, parameter set) pair as a single fused recurrence."""
    if len(seqs) != len(params):
        raise ValueError("scan_group: one parameter set per sequence")
    projected = [p.project(q) for q, p in zip(seqs, params)]
    y = selective_scan(_stack(seqs), _stack([q[0] for q in projected]),
                       _stack([p.a_matrix() for p in params]),
                       _stack([q[1] for q in projected]), _stack([q[2] for q in projected]),
                       _stack([p.d_skip for p in params]))
    return _unstack(y)


def s6_scan(seq: Tensor, params: S6Params) -> Tensor:
    """Selective scan of an N,L,D sequence (causal in L)."""
    if seq.ndim != 3:
        raise ValueError(f"s6_scan: expected N,L,D, got {seq.shape}")
    return scan_group([seq], [params])[0]


def multi_directional_scan(x: Tensor, params: Sequence[S6Params],
                           direction_set: str = "conventional") -> Tensor:
    """expand -> one S6 per direction -> merge (sum); N,C,H,W in and out.

    ``params`` holds four parameter sets, or a single one shared by all four
    directions.
    """
    n, c, h, w = x.shape
    orders = orders_for(h, w, direction_set)
    if len(params) == 1:
        params = list(params) * len(orders)
    if len(params) != len(orders):
        raise ValueError(f"need {len(orders)} S6 parameter sets (or 1 shared), got {len(params)}")
    seqs = expand(x, orders)
    return merge(scan_group(seqs, params), orders)
