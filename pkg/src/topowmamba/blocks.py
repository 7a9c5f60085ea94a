"""Composite blocks: SCA attention, VSS / SnakeVSS branches, SCVSS, the wavelet
Mamba block, and the patch embedding / merging down-samplers.

All blocks take and return N,C,H,W tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor
from .nn import (Conv2d, LayerNorm, Linear, Module, norm2d, to_channels_first,
                 to_channels_last)
from .scan import S6Params, multi_directional_scan, scan_group
from .wavelet import WaveletBands, crop, dwt2, iwt2, pad_to_even


@dataclass
class BlockConfig:
    channels: int
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    n_state: int = 16
    ffn_ratio: float = 4.0
    norm_eps: float = 1e-5
    sca_reduction: int = 8
    sca_kernel: int = 7
    vss_expand: int = 2
    shared_scan_params: bool = False
    channel_mamba_expand: int = 4

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.mlp_ratio <= 0 or self.ffn_ratio <= 0:
            raise ValueError("mlp_ratio and ffn_ratio must be positive")


def drop_path(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero the whole branch per sample with probability p and
    rescale survivors by 1/(1-p). Identity outside training."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path needs an rng in training mode")
    n = x.shape[0]
    keep = rng.random(n) >= p
    scale = 0.0 if p >= 1.0 else 1.0 / (1.0 - p)
    mask = np.where(keep, scale, 0.0).astype(x.dtype).reshape((n,) + (1,) * (x.ndim - 1))
    return ops.mul(x, Tensor(np.broadcast_to(mask, x.shape), dtype=x.dtype))


def _expand_like(gate: Tensor, x: Tensor) -> Tensor:
    return ops.expand(gate, x.shape)


class SCA(Module):
    """Pooled-FC gating (shared two-layer FC over max and avg pools), followed by
    a conv gate over the channel-wise max and mean maps."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 8,
                 kernel: int = 7):
        hidden = max(1, math.ceil(channels / reduction))
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2)

    def _pooled_fc(self, pooled: Tensor) -> Tensor:
        n, c = pooled.shape[:2]
        return self.fc2(ops.relu(self.fc1(ops.reshape(pooled, (n, c)))))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        logits = ops.add(self._pooled_fc(ops.pool_reduce(x, "global_max")),
                         self._pooled_fc(ops.pool_reduce(x, "global_avg")))
        gate = ops.reshape(ops.sigmoid(logits), (n, c, 1, 1))
        xs = ops.mul(x, _expand_like(gate, x))
        stats = ops.concat([ops.pool_reduce(xs, "channel_max"),
                            ops.pool_reduce(xs, "channel_mean")], axis=1)
        gate2 = ops.sigmoid(self.conv(stats))
        return ops.mul(xs, _expand_like(gate2, xs))


def sca_refine(x: Tensor, sca: SCA) -> Tensor:
    return sca(x)


class VSSBranch(Module):
    """LN -> expand to main/gate paths; main: depthwise 3x3 -> SiLU -> 4-way
    selective scan -> LN; gate: SiLU; product -> project back to C.

    ``direction_set`` is "conventional" (VSS) or "serpentine" (SnakeVSS).
    """

    def __init__(self, channels: int, rng: np.random.Generator, direction_set: str,
                 expand: int = 2, n_state: int = 16, shared_params: bool = False,
                 residual: bool = True, eps: float = 1e-5):
        inner = expand * channels
        self.direction_set = direction_set
        self.residual = residual
        self.norm = LayerNorm(channels, eps)
        self.in_main = Linear(channels, inner, rng, bias=False)
        self.in_gate = Linear(channels, inner, rng, bias=False)
        self.dwconv = Conv2d(inner, inner, 3, rng, padding=1, groups=inner)
        self.scans = [S6Params(inner, rng, n_state) for _ in range(1 if shared_params else 4)]
        self.out_norm = LayerNorm(inner, eps)
        self.out_proj = Linear(inner, channels, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        z = self.norm(to_channels_last(x))
        main = to_channels_first(self.in_main(z))
        main = ops.silu(self.dwconv(main))
        main = multi_directional_scan(main, self.scans, self.direction_set)
        main = self.out_norm(to_channels_last(main))
        gate = ops.silu(self.in_gate(z))
        out = to_channels_first(self.out_proj(ops.mul(main, gate)))
        return ops.add(out, x) if self.residual else out


def vss_branch(x: Tensor, branch: VSSBranch) -> Tensor:
    return branch(x)


class MLP(Module):
    def __init__(self, channels: int, ratio: float, rng: np.random.Generator):
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class SCVSS(Module):
    """Conv, SnakeVSS and VSS branches, each SCA-refined, summed under DropPath
    onto the input; then a pre-norm MLP with its own residual.

    The VSS branches run without their internal residual here because the
    block adds ``x`` once around the branch sum.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, snake_enabled: bool = True):
        c = cfg.channels
        self.drop_path_rate = cfg.drop_path_rate
        self.norm = LayerNorm(c, cfg.norm_eps)
        self.conv = Conv2d(c, c, 3, rng, padding=1)
        branch_kw = dict(expand=cfg.vss_expand, n_state=cfg.n_state,
                         shared_params=cfg.shared_scan_params, residual=False, eps=cfg.norm_eps)
        self.snake = VSSBranch(c, rng, "serpentine" if snake_enabled else "conventional",
                               **branch_kw)
        self.vss = VSSBranch(c, rng, "conventional", **branch_kw)
        self.sca_conv = SCA(c, rng, cfg.sca_reduction, cfg.sca_kernel)
        self.sca_snake = SCA(c, rng, cfg.sca_reduction, cfg.sca_kernel)
        self.sca_vss = SCA(c, rng, cfg.sca_reduction, cfg.sca_kernel)
        self.mlp_norm = LayerNorm(c, cfg.norm_eps)
        self.mlp = MLP(c, cfg.mlp_ratio, rng)

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        x_conv = self.conv(norm2d(self.norm, x))
        branches = ops.add(ops.add(self.sca_conv(x_conv), self.sca_snake(self.snake(x))),
                           self.sca_vss(self.vss(x)))
        y = ops.add(x, drop_path(branches, self.drop_path_rate, training, rng))
        y_cl = to_channels_last(y)
        return to_channels_first(ops.add(y_cl, self.mlp(self.mlp_norm(y_cl))))


def scvss_forward(x: Tensor, block: SCVSS, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    return block(x, training, rng)


class ChannelMamba(Module):
    """Selective scan along the channel axis: every spatial position is an
    independent length-C sequence of scalars, lifted to ``expand`` features,
    scanned forwards and backwards (summed), projected back, plus residual."""

    def __init__(self, rng: np.random.Generator, expand: int = 4, n_state: int = 16):
        self.in_proj = Linear(1, expand, rng)
        self.fwd = S6Params(expand, rng, n_state)
        self.bwd = S6Params(expand, rng, n_state)
        self.out_proj = Linear(expand, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        seq = ops.reshape(to_channels_last(x), (n * h * w, c, 1))
        u = ops.silu(self.in_proj(seq))
        rev = np.arange(c - 1, -1, -1)
        u_rev = ops.gather(u, rev, axis=1, inverse=rev)
        y_f, y_b = scan_group([u, u_rev], [self.fwd, self.bwd])
        y = ops.add(y_f, ops.gather(y_b, rev, axis=1, inverse=rev))
        out = ops.add(seq, self.out_proj(y))
        return to_channels_first(ops.reshape(out, (n, h, w, c)))


class WMB(Module):
    """Wavelet Mamba block: x + WM(LN(x)), then a pre-norm FFN residual.

    WM: Haar DWT; LL through 3x3 conv -> channel Mamba -> 3x3 conv; each of
    LH/HL/HH through depthwise 3x3 + pointwise 1x1; inverse DWT.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        c = cfg.channels
        self.norm1 = LayerNorm(c, cfg.norm_eps)
        self.ll_conv_in = Conv2d(c, c, 3, rng, padding=1)
        self.channel_mamba = ChannelMamba(rng, cfg.channel_mamba_expand, cfg.n_state)
        self.ll_conv_out = Conv2d(c, c, 3, rng, padding=1)
        self.high_dw = [Conv2d(c, c, 3, rng, padding=1, groups=c) for _ in range(3)]
        self.high_pw = [Conv2d(c, c, 1, rng) for _ in range(3)]
        self.norm2 = LayerNorm(c, cfg.norm_eps)
        self.ffn = MLP(c, cfg.ffn_ratio, rng)

    def wavelet_mix(self, z: Tensor) -> Tensor:
        bands = dwt2(z)
        ll = self.ll_conv_out(self.channel_mamba(self.ll_conv_in(bands.ll)))
        highs = [pw(dw(b)) for b, dw, pw in zip((bands.lh, bands.hl, bands.hh),
                                                 self.high_dw, self.high_pw)]
        return iwt2(WaveletBands(ll, *highs))

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        xp, size = pad_to_even(x)
        wm = crop(self.wavelet_mix(norm2d(self.norm1, xp)), size)
        i1 = to_channels_last(ops.add(wm, x))
        i2 = ops.add(i1, self.ffn(self.norm2(i1)))
        return to_channels_first(i2)


def wmb_forward(x: Tensor, block: WMB) -> Tensor:
    return block(x)


class PatchEmbed(Module):
    """2x2 stride-2 conv followed by channel LayerNorm."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, eps: float = 1e-5):
        self.proj = Conv2d(c_in, c_out, 2, rng, stride=2)
        self.norm = LayerNorm(c_out, eps)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"patch_embed: odd spatial extents {x.shape[2:]}")
        return norm2d(self.norm, self.proj(x))


class PatchMerge(Module):
    """Gather 2x2 neighbourhoods into 4C channels, LayerNorm, project to 2C."""

    def __init__(self, channels: int, rng: np.random.Generator, out_channels: int | None = None,
                 eps: float = 1e-5):
        self.norm = LayerNorm(4 * channels, eps)
        self.reduction = Linear(4 * channels, out_channels or 2 * channels, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch_merge: odd spatial extents {(h, w)}")
        blocks = ops.reshape(x, (n, c, h // 2, 2, w // 2, 2))
        # channel groups ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
        gathered = ops.reshape(ops.permute(blocks, (0, 2, 4, 5, 3, 1)), (n, h // 2, w // 2, 4 * c))
        return to_channels_first(self.reduction(self.norm(gathered)))


def patch_embed(x: Tensor, layer: PatchEmbed) -> Tensor:
    return layer(x)


def patch_merge(x: Tensor, layer: PatchMerge) -> Tensor:
    return layer(x)
