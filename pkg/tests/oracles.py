"""Independent reference implementations used as test oracles.

These are deliberately written as plain scalar loops over Python floats (or
per-element numpy) so they share no code path with the vectorized package.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_naive(x, w, b=None, stride=1, padding=0, groups=1):
    """Six-nested-loop cross-correlation with zero padding.

    Accumulates in (input channel, kernel row, kernel column) order starting from
    0.0 and adds the bias last.
    """
    n, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    c_out_g = c_out // groups
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for bn in range(n):
        for co in range(c_out):
            g = co // c_out_g
            for oy in range(h_out):
                for ox in range(w_out):
                    acc = 0.0
                    for ci in range(c_in_g):
                        for i in range(kh):
                            for j in range(kw):
                                y = oy * stride + i - padding
                                xx = ox * stride + j - padding
                                v = float(x[bn, g * c_in_g + ci, y, xx]) \
                                    if 0 <= y < h and 0 <= xx < wd else 0.0
                                acc = acc + float(w[co, ci, i, j]) * v
                    if b is not None:
                        acc = acc + float(b[co])
                    out[bn, co, oy, ox] = acc
    return out


def bilinear_up2_pixel(img, oy, ox):
    """align_corners=False bilinear sample of a 2-D image at output pixel (oy, ox) of a 2x upsample."""
    h, w = img.shape

    def src(o, n):
        s = (o + 0.5) / 2.0 - 0.5
        s = min(max(s, 0.0), n - 1)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    y0, y1, fy = src(oy, h)
    x0, x1, fx = src(ox, w)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def s6_recurrence(x, delta, a, b, c, d_skip):
    """Explicit per-step recurrence for one sequence.

    x, delta: (L, D); a: (D, S); b, c: (L, S); d_skip: (D,).
    """
    length, d = x.shape
    s = a.shape[1]
    h = np.zeros((d, s))
    y = np.zeros((length, d))
    for t in range(length):
        for k in range(d):
            for n in range(s):
                h[k, n] = math.exp(delta[t, k] * a[k, n]) * h[k, n] + delta[t, k] * b[t, n] * x[t, k]
            y[t, k] = sum(c[t, n] * h[k, n] for n in range(s)) + d_skip[k] * x[t, k]
    return y


def softplus(v):
    return np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0)


def seg_loss_pixels(logits, labels, smooth=1e-5):
    """Dice + CE for (N,C,H,W) logits by explicit per-pixel summation (float64)."""
    n, c, h, w = logits.shape
    ce_total = 0.0
    inter = [0.0] * c
    psum = [0.0] * c
    ysum = [0.0] * c
    for bn in range(n):
        for i in range(h):
            for j in range(w):
                z = [float(logits[bn, k, i, j]) for k in range(c)]
                m = max(z)
                e = [math.exp(v - m) for v in z]
                tot = sum(e)
                p = [v / tot for v in e]
                lab = int(labels[bn, i, j])
                ce_total -= math.log(p[lab])
                for k in range(c):
                    psum[k] += p[k]
                    if k == lab:
                        inter[k] += p[k]
                        ysum[k] += 1.0
    dice = 1.0 - sum((2 * inter[k] + smooth) / (psum[k] + ysum[k] + smooth) for k in range(c)) / c
    return dice + ce_total / (n * h * w)


def dice_iou_sets(pred, gt, cls):
    """Dice and IoU (percent) by Python set counting of pixel coordinates."""
    a = {(int(i), int(j)) for i, j in zip(*np.nonzero(pred == cls))}
    b = {(int(i), int(j)) for i, j in zip(*np.nonzero(gt == cls))}
    if not a and not b:
        return 100.0, 100.0, "both_empty"
    inter = len(a & b)
    flag = None if a and b else ("pred_empty" if not a else "gt_empty")
    return 100.0 * 2 * inter / (len(a) + len(b)), 100.0 * inter / len(a | b), flag


def boundary_bruteforce(mask):
    """Foreground pixels with a 4-neighbour that is background or outside the image."""
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                    out.append((i, j))
                    break
    return out


def hd95_bruteforce(pred, gt, spacing=(1.0, 1.0)):
    """Pairwise distances by double loop, sort, nearest-rank index ceil(0.95 n)."""
    pa = boundary_bruteforce(pred.astype(bool))
    pb = boundary_bruteforce(gt.astype(bool))
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return math.hypot(pred.shape[0] * spacing[0], pred.shape[1] * spacing[1])

    def directed(src, dst):
        ds = []
        for (i, j) in src:
            best = min(math.sqrt(((i - y) * spacing[0]) ** 2 + ((j - x) * spacing[1]) ** 2)
                       for (y, x) in dst)
            ds.append(best)
        ds.sort()
        k = math.ceil(0.95 * len(ds) - 1e-9)  # 1-based nearest rank
        return ds[max(k, 1) - 1]

    return max(directed(pa, pb), directed(pb, pa))


def count_parameters(cfg) -> int:
    """Layer-by-layer parameter count of the network from its config alone."""
    d = cfg.stage_dims
    k = cfg.num_classes
    s = cfg.n_state

    def conv(ci, co, kk, groups=1, bias=True):
        return co * (ci // groups) * kk * kk + (co if bias else 0)

    def lin(i, o, bias=True):
        return i * o + (o if bias else 0)

    def ln(c):
        return 2 * c

    def s6(di):
        r = math.ceil(di / 16)
        return di * s + di + lin(di, r, False) + lin(r, di) + 2 * lin(di, s, False)

    def sca(c):
        hdn = max(1, math.ceil(c / cfg.sca_reduction))
        return lin(c, hdn) + lin(hdn, c) + conv(2, 1, 7)

    def vss(c):
        inner = 2 * c
        n_sets = 1 if cfg.shared_scan_params else 4
        return (ln(c) + 2 * lin(c, inner, False) + conv(inner, inner, 3, groups=inner)
                + n_sets * s6(inner) + ln(inner) + lin(inner, c, False))

    def mlp(c, ratio):
        hdn = int(round(c * ratio))
        return lin(c, hdn) + lin(hdn, c)

    def scvss(c):
        return ln(c) + conv(c, c, 3) + 2 * vss(c) + 3 * sca(c) + ln(c) + mlp(c, cfg.mlp_ratio)

    def wmb(c):
        channel_mamba = lin(1, 4) + 2 * s6(4) + lin(4, 1)
        return (ln(c) + 2 * conv(c, c, 3) + channel_mamba + 3 * (conv(c, c, 3, groups=c) + conv(c, c, 1))
                + ln(c) + mlp(c, cfg.ffn_ratio))

    total = conv(cfg.in_channels, d[0], 7)
    total += conv(d[0], d[1], 2) + ln(d[1])
    for st in (3, 4, 5):
        total += ln(4 * d[st - 2]) + lin(4 * d[st - 2], d[st - 1], False)
    for st, cnt in zip((2, 3, 4, 5), cfg.scvss_counts):
        total += cnt * scvss(d[st - 1])
    total += sum(wmb(d[st - 1]) for st in cfg.wmb_encoder_stages)
    total += sum(wmb(d[st - 1]) for st in cfg.wmb_decoder_stages)
    for st in (4, 3, 2, 1):
        c_in, c = d[st], d[st - 1]
        total += conv(c_in, c, 3) + conv(c, c, 1) + conv(2 * c, c, 3) + ln(c) + conv(c, c, 3) + ln(c)
        total += conv(c, k, 1)
    total += 2 * conv(d[0], d[0], 3) + conv(d[0], k, 1)
    return total


def ellipse_area_fraction_mc(spec, n_draws, rng):
    """Monte-Carlo estimate of the expected outer-ellipse area fraction and the
    analytic min/max fractions implied by the radius range."""
    h, w = spec.image_size
    m = min(h, w)
    lo, hi = spec.radius_ranges[0]
    a = rng.uniform(lo, hi, n_draws) * m
    b = rng.uniform(lo, hi, n_draws) * m
    # area of each ellipse by sampling points in its bounding box
    u = rng.uniform(-1, 1, (n_draws, 256))
    v = rng.uniform(-1, 1, (n_draws, 256))
    inside = (u ** 2 + v ** 2 <= 1).mean(axis=1)
    areas = inside * 4 * a * b
    return areas.mean() / (h * w), math.pi * (lo * m) ** 2 / (h * w), math.pi * (hi * m) ** 2 / (h * w)
