"""One level of the orthonormal 2D Haar transform.

For each 2x2 block [[a, b], [c, d]]:

    ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2

so ``lh`` contrasts the two rows of a block (vertical detail) and ``hl`` the two
columns (horizontal detail). The 4x4 mixing matrix is symmetric and orthogonal,
which makes the inverse the same mixing applied to the bands.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor, record

CONVENTION = "haar-orthonormal/lh=row-contrast/hl=col-contrast"

# rows: ll, lh, hl, hh; columns: a, b, c, d
_SIGNS = np.array([[1, 1, 1, 1],
                   [1, 1, -1, -1],
                   [1, -1, 1, -1],
                   [1, -1, -1, 1]], dtype=np.float64)
_BANDS = ("ll", "lh", "hl", "hh")
# (row offset, column offset) of a, b, c, d inside a block
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class WaveletBands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    convention: str = CONVENTION

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ll.shape


def _mix(parts, signs) -> np.ndarray:
    out = parts[0] * signs[0] if signs[0] != 1 else parts[0].copy()
    for p, s in zip(parts[1:], signs[1:]):
        out = out + p if s > 0 else out - p
    return out * 0.5


def dwt2(x: Tensor) -> WaveletBands:
    if x.ndim != 4:
        raise ValueError(f"dwt2: expected N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"dwt2: spatial extents must be even, got {h}x{w}; pad first")
    corners = [x.data[:, :, r::2, q::2] for r, q in _CORNERS]

    bands = []
    for k, name in enumerate(_BANDS):
        signs = _SIGNS[k]

        def bw(g, signs=signs):
            gx = np.empty((n, c, h, w), dtype=g.dtype)
            for (r, q), s in zip(_CORNERS, signs):
                gx[:, :, r::2, q::2] = g * (0.5 * s)
            return (gx,)

        bands.append(record(f"dwt2_{name}", [x], _mix(corners, signs), bw))
    return WaveletBands(*bands)


def iwt2(bands: WaveletBands) -> Tensor:
    parts = bands.as_tuple()
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape:
            raise ValueError(f"iwt2: band shapes differ: {[q.shape for q in parts]}")
    n, c, h2, w2 = shape
    data = [p.data for p in parts]
    out = np.empty((n, c, 2 * h2, 2 * w2), dtype=np.result_type(*data))
    for k, (r, q) in enumerate(_CORNERS):
        out[:, :, r::2, q::2] = _mix(data, _SIGNS[:, k])

    def bw(g):
        corners = [g[:, :, r::2, q::2] for r, q in _CORNERS]
        return tuple(_mix(corners, _SIGNS[k]) for k in range(4))

    return record("iwt2", list(parts), out, bw)


def _pad_index(n: int) -> np.ndarray:
    idx = np.arange(n + 1)
    idx[n] = n - 2 if n >= 2 else 0
    return idx


def pad_to_even(x: Tensor) -> tuple[Tensor, tuple[int, int]]:
    """Reflect-pad odd spatial extents by one row/column at the far edge.

    Extent-1 axes have nothing to reflect and are replicated instead. Returns
    the padded tensor and the original (H, W) for :func:`crop`.
    """
    h, w = x.shape[2], x.shape[3]
    out = x
    if h % 2:
        out = ops.gather(out, _pad_index(h), axis=2)
    if w % 2:
        out = ops.gather(out, _pad_index(w), axis=3)
    return out, (h, w)


def crop(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = size
    out = x
    if x.shape[2] != h:
        out = ops.gather(out, np.arange(h), axis=2)
    if x.shape[3] != w:
        out = ops.gather(out, np.arange(w), axis=3)
    return out
