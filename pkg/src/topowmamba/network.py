"""Encoder-decoder assembly with deep supervision."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .autograd import NonFiniteError, Tensor
from .blocks import SCVSS, WMB, BlockConfig, PatchEmbed, PatchMerge
from .nn import CONV_INIT_MODES, Conv2d, LayerNorm, Module, conv_init, norm2d


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 7
    stage_dims: list[int] = field(default_factory=lambda: [48, 96, 192, 384, 768])
    scvss_counts: list[int] = field(default_factory=lambda: [2, 2, 5, 2])
    wmb_encoder_stages: list[int] = field(default_factory=lambda: [1, 3, 5])
    wmb_decoder_stages: list[int] = field(default_factory=list)
    snake_enabled: bool = True
    drop_path_rate: float = 0.1
    deep_supervision: bool = True
    input_size: list[int] = field(default_factory=lambda: [256, 256])
    n_state: int = 16
    mlp_ratio: float = 4.0
    ffn_ratio: float = 4.0
    sca_reduction: int = 8
    shared_scan_params: bool = False
    norm_eps: float = 1e-5
    conv_init: str = "fan_in"  # or "trunc_normal" (std 0.02 for conv weights too)
    seed: int = 0

    def __post_init__(self):
        self.stage_dims = [int(d) for d in self.stage_dims]
        self.scvss_counts = [int(c) for c in self.scvss_counts]
        self.wmb_encoder_stages = sorted(int(s) for s in self.wmb_encoder_stages)
        self.wmb_decoder_stages = sorted(int(s) for s in self.wmb_decoder_stages)
        self.input_size = [int(s) for s in self.input_size]
        self.validate()

    def validate(self) -> None:
        if len(self.stage_dims) != 5 or min(self.stage_dims) < 1:
            raise ConfigError(f"stage_dims needs 5 positive entries, got {self.stage_dims}")
        if len(self.scvss_counts) != 4 or min(self.scvss_counts) < 0:
            raise ConfigError(f"scvss_counts needs 4 entries for stages 2-5, got {self.scvss_counts}")
        for key in ("wmb_encoder_stages", "wmb_decoder_stages"):
            bad = [s for s in getattr(self, key) if s not in range(1, 6)]
            if bad:
                raise ConfigError(f"{key} entries must lie in 1..5, got {bad}")
        if len(self.input_size) != 2 or any(s <= 0 or s % 32 for s in self.input_size):
            raise ConfigError(f"input_size must be two positive multiples of 32, got {self.input_size}")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ConfigError("need num_classes >= 2 and in_channels >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.conv_init not in CONV_INIT_MODES:
            raise ConfigError(f"conv_init must be one of {CONV_INIT_MODES}, got {self.conv_init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SegOutput:
    main: Tensor
    aux: list[Tensor] = field(default_factory=list)  # aux[k-1] is at 1/2^k resolution
    features: list[Tensor] = field(default_factory=list)  # encoder stage outputs 1..5


class ConvNormAct(Module):
    """3x3 conv -> channel LayerNorm -> GELU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, eps: float):
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.norm = LayerNorm(c_out, eps)

    def forward(self, x: Tensor) -> Tensor:
        return ops.gelu(norm2d(self.norm, self.conv(x)))


class UpBlock(Module):
    """nearest x2 -> 3x3 conv; concat with the 1x1-aligned skip; two ConvNormAct."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, rng: np.random.Generator, eps: float):
        self.up_conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.skip_align = Conv2d(c_skip, c_out, 1, rng)
        self.fuse1 = ConvNormAct(2 * c_out, c_out, rng, eps)
        self.fuse2 = ConvNormAct(c_out, c_out, rng, eps)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up_conv(ops.resample2d(x, 2, "nearest"))
        return self.fuse2(self.fuse1(ops.concat([up, self.skip_align(skip)], axis=1)))


class EncoderStage(Module):
    def __init__(self, down: Module, blocks: list[SCVSS], wmb: WMB | None):
        self.down = down
        self.blocks = blocks
        self.wmb = wmb

    def forward(self, x: Tensor, training: bool, rng) -> Tensor:
        x = self.down(x)
        for blk in self.blocks:
            x = blk(x, training, rng)
        if self.wmb is not None:
            x = self.wmb(x)
        return x


class TopoWMamba(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        self.cfg = cfg
        with conv_init(cfg.conv_init):
            self._build(cfg, seed)

    def _build(self, cfg: ModelConfig, seed: int | None) -> None:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        d = cfg.stage_dims
        eps = cfg.norm_eps

        def block_cfg(c: int, dp: float = 0.0) -> BlockConfig:
            return BlockConfig(channels=c, mlp_ratio=cfg.mlp_ratio, drop_path_rate=dp,
                               n_state=cfg.n_state, ffn_ratio=cfg.ffn_ratio, norm_eps=eps,
                               sca_reduction=cfg.sca_reduction,
                               shared_scan_params=cfg.shared_scan_params)

        total = sum(cfg.scvss_counts)
        rates = list(np.linspace(0.0, cfg.drop_path_rate, total)) if total > 1 else [0.0] * total

        stem = Conv2d(cfg.in_channels, d[0], 7, rng, stride=2, padding=3)
        stages = [EncoderStage(stem, [], WMB(block_cfg(d[0]), rng) if 1 in cfg.wmb_encoder_stages
                               else None)]
        k = 0
        for s in range(2, 6):
            down = PatchEmbed(d[0], d[1], rng, eps) if s == 2 else PatchMerge(d[s - 2], rng, d[s - 1], eps)
            blocks = []
            for _ in range(cfg.scvss_counts[s - 2]):
                blocks.append(SCVSS(block_cfg(d[s - 1], float(rates[k])), rng, cfg.snake_enabled))
                k += 1
            wmb = WMB(block_cfg(d[s - 1]), rng) if s in cfg.wmb_encoder_stages else None
            stages.append(EncoderStage(down, blocks, wmb))
        self.encoder = stages

        # decoder stage s (1..4) restores encoder-stage-s resolution; decoder
        # WMB index 5 acts on the bottleneck before decoding
        self.bottleneck_wmb = WMB(block_cfg(d[4]), rng) if 5 in cfg.wmb_decoder_stages else None
        self.decoder = [UpBlock(d[s], d[s - 1], d[s - 1], rng, eps) for s in range(4, 0, -1)]
        self.decoder_wmb = [WMB(block_cfg(d[s - 1]), rng) if s in cfg.wmb_decoder_stages else None
                            for s in range(4, 0, -1)]
        self.aux_heads = [Conv2d(d[s - 1], cfg.num_classes, 1, rng) for s in range(4, 0, -1)]
        self.head1 = Conv2d(d[0], d[0], 3, rng, padding=1)
        self.head2 = Conv2d(d[0], d[0], 3, rng, padding=1)
        self.head_out = Conv2d(d[0], cfg.num_classes, 1, rng)

    def encode(self, x: Tensor, training: bool = False, rng=None) -> list[Tensor]:
        feats = []
        for i, stage in enumerate(self.encoder, start=1):
            try:
                x = stage(x, training, rng)
            except NonFiniteError as err:
                raise NonFiniteError(f"encoder stage {i}: {err}") from err
            feats.append(x)
        return feats

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> SegOutput:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected N,{cfg.in_channels},H,W input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"input extents must be multiples of 32, got {x.shape[2:]}")
        feats = self.encode(x, training, rng)
        y = feats[4]
        if self.bottleneck_wmb is not None:
            y = self.bottleneck_wmb(y)
        aux = []
        for j, (up, wmb, head) in enumerate(zip(self.decoder, self.decoder_wmb, self.aux_heads)):
            s = 4 - j
            try:
                y = up(y, feats[s - 1])
                if wmb is not None:
                    y = wmb(y)
            except NonFiniteError as err:
                raise NonFiniteError(f"decoder stage {s}: {err}") from err
            if cfg.deep_supervision:
                aux.append(head(y))
        try:
            y = ops.resample2d(y, 2, "nearest")
            y = ops.gelu(self.head1(y))
            y = ops.gelu(self.head2(y))
            main = self.head_out(y)
        except NonFiniteError as err:
            raise NonFiniteError(f"segmentation head: {err}") from err
        aux.reverse()  # finest first: scales 1/2, 1/4, 1/8, 1/16
        return SegOutput(main=main, aux=aux, features=feats)


def build_model(cfg: ModelConfig, seed: int | None = None) -> TopoWMamba:
    cfg.validate()
    return TopoWMamba(cfg, seed)


def model_forward(model: TopoWMamba, x: Tensor, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> SegOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model(x, training=mode == "train", rng=rng)
