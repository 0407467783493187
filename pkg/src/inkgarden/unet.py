"""Conditional U-Net noise predictor with text cross-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .errors import ShapeMismatchError, TimestepError
from .nn import (
    Attention,
    Conv2d,
    Downsample,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    sinusoidal_embedding,
)


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 4
    latent_size: int = 8
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    blocks_per_stage: int = 2
    d_text: int = 64
    temb_dim: int = 64
    max_timestep: int = 1000

    def stage_channels(self):
        return [self.base_channels * m for m in self.channel_mults]


class ResBlock(Module):
    def __init__(self, c_in, c_out, temb_dim, rng):
        super().__init__()
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.temb_proj = Linear(temb_dim, c_out, rng)
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x, temb):
        h = self.conv1(tg.silu(self.norm1(x)))
        shift = self.temb_proj(tg.silu(temb))
        h = tg.add(h, tg.reshape(shift, shift.shape + (1, 1)))
        h = self.conv2(tg.silu(self.norm2(h)))
        return tg.add(h, self.skip(x) if self.skip is not None else x)

    __call__ = forward


class TransformerBlock(Module):
    """Spatial tokens through a self-attention layer then a cross-attention layer."""

    def __init__(self, channels, d_text, rng):
        super().__init__()
        self.norm_self = LayerNorm(channels)
        self.self_attn = Attention(channels, channels, rng)
        self.norm_cross = LayerNorm(channels)
        self.cross = Attention(channels, d_text, rng)

    def forward(self, x, text):
        n, c, h, w = x.shape
        tokens = tg.reshape(tg.transpose(x, (0, 2, 3, 1)), (n, h * w, c))
        normed = self.norm_self(tokens)
        tokens = tg.add(tokens, self.self_attn(normed, normed))
        tokens = tg.add(tokens, self.cross(self.norm_cross(tokens), text))
        return tg.transpose(tg.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))

    __call__ = forward


class StageBlock(Module):
    def __init__(self, c_in, c_out, temb_dim, d_text, rng):
        super().__init__()
        self.res = ResBlock(c_in, c_out, temb_dim, rng)
        self.attn = TransformerBlock(c_out, d_text, rng)

    def forward(self, x, temb, text):
        return self.attn(self.res(x, temb), text)

    __call__ = forward


class UNet(Module):
    """Encoder-decoder noise predictor; output shape always equals the input latent's."""

    def __init__(self, config: UNetConfig, rng):
        super().__init__()
        self.config = config
        ch = config.stage_channels()
        self.time_in = Linear(config.temb_dim, config.temb_dim, rng)
        self.time_out = Linear(config.temb_dim, config.temb_dim, rng)
        self.conv_in = Conv2d(config.latent_channels, ch[0], 3, rng)

        self.down = ModuleList()
        for i, c in enumerate(ch):
            stage = ModuleList(
                StageBlock(c, c, config.temb_dim, config.d_text, rng)
                for _ in range(config.blocks_per_stage)
            )
            self.down.append(stage)
        self.downsamplers = ModuleList(
            Downsample(ch[i], ch[i + 1], rng) for i in range(len(ch) - 1)
        )
        self.mid = ResBlock(ch[-1], ch[-1], config.temb_dim, rng)
        self.up = ModuleList()
        for i, c in enumerate(reversed(ch)):
            stage = ModuleList(
                StageBlock(2 * c, c, config.temb_dim, config.d_text, rng)
                for _ in range(config.blocks_per_stage)
            )
            self.up.append(stage)
        self.upsamplers = ModuleList(
            Conv2d(ch[i + 1], ch[i], 3, rng) for i in reversed(range(len(ch) - 1))
        )
        self.norm_out = GroupNorm(ch[0])
        self.conv_out = Conv2d(ch[0], config.latent_channels, 3, rng)

    def forward(self, z, t, text):
        """z: (N, c, h, w) latents; t: integer timestep(s); text: (N, L, d_text)."""
        cfg = self.config
        if z.shape[-3:] != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise ShapeMismatchError(f"latent shape {z.shape} does not match config")
        t = np.atleast_1d(np.asarray(t))
        if t.min() < 0 or t.max() > cfg.max_timestep:
            raise TimestepError(f"timestep out of range [0, {cfg.max_timestep}]: {t}")
        if t.shape[0] == 1 and z.shape[0] > 1:
            t = np.repeat(t, z.shape[0])
        temb = tg.Tensor(sinusoidal_embedding(t, cfg.temb_dim))
        temb = self.time_out(tg.silu(self.time_in(temb)))

        h = self.conv_in(z)
        skips = []
        for i, stage in enumerate(self.down):
            for block in stage:
                h = block(h, temb, text)
                skips.append(h)
            if i < len(self.downsamplers):
                h = self.downsamplers[i](h)
        h = self.mid(h, temb)
        for i, stage in enumerate(self.up):
            for block in stage:
                h = block(tg.concat([h, skips.pop()], axis=1), temb, text)
            if i < len(self.upsamplers):
                h = self.upsamplers[i](tg.upsample2x(h))
        return self.conv_out(tg.silu(self.norm_out(h)))

    __call__ = forward

    def cross_attention_weight_names(self, prefix="unet"):
        """The adapter-target registry: every cross-attention projection weight."""
        names = []
        for name, _ in self.named_parameters(prefix):
            parts = name.split(".")
            if len(parts) >= 3 and parts[-3] == "cross" and parts[-1] == "weight":
                names.append(name)
        return names
