"""Network assembly: channel attention, RSTCAB blocks, and the full RSTCANet.

The network packs the one-channel Bayer mosaic to 4 channels at half
resolution, embeds per pixel, runs K residual blocks of windowed attention
with a parameter-shared channel-attention gate per layer pair, adds the
shallow features back over a long skip, and reconstructs RGB at full
resolution with a sub-pixel upsampling head.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import Conv2d, Linear, collect_params, kaiming_normal
from .swin import SwinLayer

CA_MODES = ("none", "single", "per_pair", "per_layer")


@dataclass
class ModelConfig:
    """Complete hyperparameter set for any variant or ablation."""

    channels: int = 72            # C
    num_blocks: int = 2           # K, RSTCAB count
    heads: int = 6
    layers_per_block: int = 6     # N, STLs per RSTCAB
    window: int = 8               # M
    ca_mode: str = "per_pair"
    short_skip: bool = False
    conv_in_block: int = 1        # trailing 3x3 convs per RSTCAB (0/1/2)
    conv_in_dfe: int = 1          # 3x3 convs closing the deep module (1/2)
    reduction: int = 16           # channel-attention bottleneck ratio
    unshuffle: int = 2
    attn_dim: Optional[int] = None  # attention width; None -> channels
    mlp_ratio: int = 4

    def validate(self) -> "ModelConfig":
        if self.ca_mode not in CA_MODES:
            raise ValueError(f"ca_mode must be one of {CA_MODES}, got {self.ca_mode!r}")
        if self.ca_mode == "per_pair" and self.layers_per_block % 2:
            raise ValueError(
                f"per-pair channel attention needs an even layer count, got N={self.layers_per_block}"
            )
        if self.conv_in_block not in (0, 1, 2):
            raise ValueError(f"conv_in_block must be 0, 1 or 2, got {self.conv_in_block}")
        if self.conv_in_dfe not in (1, 2):
            raise ValueError(f"conv_in_dfe must be 1 or 2, got {self.conv_in_dfe}")
        if self.ca_mode != "none" and self.channels < self.reduction:
            raise ValueError(
                f"channels {self.channels} below reduction {self.reduction}; "
                "the attention bottleneck would be empty"
            )
        if (self.attn_dim or self.channels) % self.heads:
            raise ValueError(
                f"attention width {self.attn_dim or self.channels} not divisible by heads {self.heads}"
            )
        if self.unshuffle != 2:
            raise ValueError("only unshuffle factor 2 is supported by the reconstruction head")
        return self


# Published variants; attention runs at width 192 for all three.
VARIANTS: dict[str, ModelConfig] = {
    "B": ModelConfig(channels=72, num_blocks=2, heads=6, layers_per_block=6, attn_dim=192),
    "S": ModelConfig(channels=96, num_blocks=4, heads=6, layers_per_block=6, attn_dim=192),
    "L": ModelConfig(channels=128, num_blocks=4, heads=8, layers_per_block=8, attn_dim=192),
    # desk-scale preset for tests and smoke runs
    "tiny": ModelConfig(channels=16, num_blocks=1, heads=2, layers_per_block=2,
                        window=4, reduction=4),
}


def variant_config(name: str) -> ModelConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(VARIANTS[name])


class ChannelAttention:
    """Squeeze-to-scale gate: pool, bottleneck, expand, sigmoid.

    Both projections are 1x1 convolutions, held as [C_in, C_out] matrices
    and applied to pooled [B, C] statistics.
    """

    def __init__(self, rng, dim: int, reduction: int):
        hidden = dim // reduction
        self.down = Linear(rng, dim, hidden)
        self.up = Linear(rng, hidden, dim)
        self.down.weight.data = kaiming_normal(rng, (dim, hidden), fan_in=dim)
        self.up.weight.data = kaiming_normal(rng, (hidden, dim), fan_in=hidden)

    def params(self):
        return OrderedDict(down=self.down, up=self.up)

    def gate(self, stats: Tensor) -> Tensor:
        """[B, C] channel statistics -> [B, C] multiplicative scales in (0,1)."""
        return ag.sigmoid(self.up(ag.relu(self.down(stats))))


def channel_attention_apply(ca: ChannelAttention, stats_source: Tensor, target: Tensor) -> Tensor:
    """Scale ``target`` [B,C,H,W] by gates pooled from ``stats_source``."""
    if stats_source.shape[1] != target.shape[1]:
        raise ValueError(
            f"channel mismatch: stats have {stats_source.shape[1]}, target has {target.shape[1]}"
        )
    pooled = ag.global_avg_pool(stats_source)           # [B,C,1,1]
    b, c = pooled.shape[0], pooled.shape[1]
    scales = ca.gate(ag.reshape(pooled, (b, c)))
    return ag.mul(target, ag.reshape(scales, (b, c, 1, 1)))


def _gate_tokens(ca: ChannelAttention, stats_tokens: Tensor, target_tokens: Tensor) -> Tensor:
    """Token-layout twin of :func:`channel_attention_apply` ([B,L,C])."""
    stats = ag.mean(stats_tokens, axis=1)               # [B,C]
    scales = ca.gate(stats)
    b, c = scales.shape
    return ag.mul(target_tokens, ag.reshape(scales, (b, 1, c)))


def tokens_to_nchw(x: Tensor, h: int, w: int) -> Tensor:
    b, _, c = x.shape
    return ag.transpose(ag.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


def nchw_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


class Rstcab:
    """N transformer layers, one shared channel-attention gate, trailing conv, outer skip.

    ``ca_mode`` selects where the shared gate is applied:

    * ``none``      -- no gating (plain residual transformer block)
    * ``single``    -- gate the final layer output with block-input statistics
    * ``per_pair``  -- gate each layer pair's output with that pair's input statistics
    * ``per_layer`` -- gate every layer output with that layer's input statistics
    """

    def __init__(self, rng, cfg: ModelConfig):
        c, n, m = cfg.channels, cfg.layers_per_block, cfg.window
        self.cfg = cfg
        self.stl = [
            SwinLayer(rng, c, cfg.heads, m, shift=0 if i % 2 == 0 else m // 2,
                      mlp_ratio=cfg.mlp_ratio, attn_dim=cfg.attn_dim)
            for i in range(n)
        ]
        self.ca = ChannelAttention(rng, c, cfg.reduction) if cfg.ca_mode != "none" else None
        self.conv = [Conv2d(rng, c, c, 3) for _ in range(cfg.conv_in_block)]

    def params(self):
        p = OrderedDict(stl=self.stl)
        if self.ca is not None:
            p["ca"] = self.ca
        if self.conv:
            p["conv"] = self.conv
        return p

    def _body(self, x: Tensor, hw) -> Tensor:
        mode = self.cfg.ca_mode
        block_in = x
        if mode in ("none", "single"):
            for layer in self.stl:
                x = layer(x, hw)
            if mode == "single":
                x = _gate_tokens(self.ca, block_in, x)
            return x
        if mode == "per_pair":
            for i in range(0, len(self.stl), 2):
                pair_in = x
                x = self.stl[i](x, hw)
                x = self.stl[i + 1](x, hw)
                x = _gate_tokens(self.ca, pair_in, x)
                if self.cfg.short_skip:
                    x = x + pair_in
            return x
        # per_layer
        for layer in self.stl:
            layer_in = x
            x = layer(x, hw)
            x = _gate_tokens(self.ca, layer_in, x)
        return x

    def __call__(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        y = self._body(x, hw)
        if self.conv:
            h, w = hw
            y = tokens_to_nchw(y, h, w)
            for conv in self.conv:
                y = conv(y)
            y = nchw_to_tokens(y)
        return x + y


class RstcaNet:
    """Shallow embed -> K RSTCAB + conv (long skip) -> sub-pixel reconstruction."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        c = cfg.channels
        in_ch = cfg.unshuffle * cfg.unshuffle  # mosaic packs to 4 channels
        self.embed = Linear(rng, in_ch, c)
        self.blocks = [Rstcab(rng, cfg) for _ in range(cfg.num_blocks)]
        self.dfe_conv = [Conv2d(rng, c, c, 3) for _ in range(cfg.conv_in_dfe)]
        self.recon_up = Conv2d(rng, c, 3 * 4, 3)
        self.recon_conv1 = Conv2d(rng, 3, 3, 3)
        self.recon_conv2 = Conv2d(rng, 3, 3, 3)

    def params(self):
        return OrderedDict(
            embed=self.embed,
            blocks=self.blocks,
            dfe=self.dfe_conv,
            recon_up=self.recon_up,
            recon_conv1=self.recon_conv1,
            recon_conv2=self.recon_conv2,
        )

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return collect_params(self)

    def shallow_extract(self, mosaic: Tensor) -> tuple[Tensor, tuple[int, int]]:
        """[B,1,H,W] mosaic -> ([B, (H/2)(W/2), C] tokens, token grid dims)."""
        b, ch, h, w = mosaic.shape
        if ch != 1:
            raise ValueError(f"expected a single-channel mosaic, got {ch} channels")
        if h % 2 or w % 2:
            raise ValueError(f"mosaic dims ({h},{w}) must be even; pad before calling")
        packed = ag.pixel_unshuffle(mosaic, self.cfg.unshuffle)  # [B,4,H/2,W/2]
        tokens = nchw_to_tokens(packed)
        return self.embed(tokens), (h // 2, w // 2)

    def deep_features(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        """The residual body: K blocks plus the closing conv(s), no skip."""
        h, w = hw
        x = tokens
        for block in self.blocks:
            x = block(x, hw)
        x = tokens_to_nchw(x, h, w)
        for conv in self.dfe_conv:
            x = conv(x)
        return nchw_to_tokens(x)

    def reconstruct(self, feat: Tensor) -> Tensor:
        """[B,C,H/2,W/2] fused features -> [B,3,H,W] RGB (unclamped)."""
        y = self.recon_up(feat)
        y = ag.pixel_shuffle(y, 2)
        y = self.recon_conv1(y)
        return self.recon_conv2(y)

    def forward(self, mosaic: Tensor) -> Tensor:
        """[B,1,H,W] mosaic -> [B,3,H,W] RGB; H,W even and >= 2*window."""
        shallow, (hm, wm) = self.shallow_extract(mosaic)
        m = self.cfg.window
        if hm < m or wm < m:
            raise ValueError(
                f"token grid ({hm},{wm}) smaller than window {m}; input must be >= {2 * m} per side"
            )
        hp = math.ceil(hm / m) * m
        wp = math.ceil(wm / m) * m
        x = shallow
        if (hp, wp) != (hm, wm):
            b, _, c = x.shape
            grid = ag.reshape(x, (b, hm, wm, c))
            grid = ag.pad_reflect_hw(grid, hp - hm, wp - wm)
            x = ag.reshape(grid, (b, hp * wp, c))
        feat = x + self.deep_features(x, (hp, wp))
        if (hp, wp) != (hm, wm):
            b, _, c = feat.shape
            grid = ag.reshape(feat, (b, hp, wp, c))
            grid = ag.slice_(grid, (slice(None), slice(0, hm), slice(0, wm)))
            feat = ag.reshape(grid, (b, hm * wm, c))
        return self.reconstruct(tokens_to_nchw(feat, hm, wm))

    __call__ = forward

    def demosaic(self, mosaic: np.ndarray) -> np.ndarray:
        """Inference on a [1,H,W] or [B,1,H,W] mosaic array; output clamped to [0,1].

        Odd sizes and sizes below 2*window are reflect-padded (parity
        preserving, so the Bayer phase survives) and cropped back.
        """
        arr = np.asarray(mosaic, dtype=np.float32)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        _, _, h, w = arr.shape
        min_side = 2 * self.cfg.window

        def pad_for(n: int) -> int:
            p = max(0, min_side - n)
            if (n + p) % 2:
                p += 1
            return p

        ph, pw = pad_for(h), pad_for(w)
        if ph or pw:
            arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
        out = self.forward(Tensor(arr)).data
        out = np.clip(out[:, :, :h, :w], 0.0, 1.0)
        return out[0] if squeeze else out


def build_variant(cfg_or_name, seed: int = 0) -> RstcaNet:
    """Construct a network from a variant name or explicit config."""
    cfg = variant_config(cfg_or_name) if isinstance(cfg_or_name, str) else cfg_or_name
    return RstcaNet(cfg, seed=seed)


def param_count(net: RstcaNet) -> int:
    return sum(t.size for t in net.named_parameters().values())


def param_bytes(net: RstcaNet) -> int:
    return 4 * param_count(net)


def zero_deep_parameters(net: RstcaNet) -> None:
    """Zero every learnable weight in the deep module (testing hook)."""
    for block in net.blocks:
        for t in collect_params(block).values():
            t.data[...] = 0.0
    for conv in net.dfe_conv:
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0


def config_to_dict(cfg: ModelConfig) -> "OrderedDict[str, object]":
    out = OrderedDict()
    for f in fields(cfg):
        out[f.name] = getattr(cfg, f.name)
    return out


def config_from_dict(d: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in d:
            continue
        raw = d[f.name]
        if f.name == "attn_dim":
            kwargs[f.name] = None if raw in (None, "", "none", "None") else int(raw)
        elif f.name == "ca_mode":
            kwargs[f.name] = str(raw)
        elif f.name == "short_skip":
            kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs).validate()
