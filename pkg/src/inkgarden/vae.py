"""Convolutional VAE mapping S x S RGB images to a small spatial latent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .errors import ConfigurationError, ShapeMismatchError
from .nn import Conv2d, Downsample, GroupNorm, Module, ModuleList


@dataclass(frozen=True)
class VaeConfig:
    image_size: int = 32
    downsample_factor: int = 4
    latent_channels: int = 4
    base_channels: int = 32
    logvar_min: float = -30.0
    logvar_max: float = 20.0

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigurationError(f"downsample factor must be a power of two >= 2, got {f}")
        if self.image_size % f != 0:
            raise ConfigurationError(f"image size {self.image_size} not divisible by factor {f}")

    @property
    def n_stages(self):
        return int(math.log2(self.downsample_factor))

    @property
    def latent_size(self):
        return self.image_size // self.downsample_factor

    def stage_channels(self):
        return [self.base_channels * (i + 1) for i in range(self.n_stages + 1)]


class VAE(Module):
    def __init__(self, config: VaeConfig, rng):
        super().__init__()
        self.config = config
        chans = config.stage_channels()
        # convs feeding straight into a GroupNorm carry no bias (dead parameter)
        self.enc_in = Conv2d(3, chans[0], 3, rng, bias=False)
        self.enc_norms = ModuleList(GroupNorm(chans[i]) for i in range(config.n_stages))
        self.enc_downs = ModuleList(
            Downsample(chans[i], chans[i + 1], rng, bias=False) for i in range(config.n_stages)
        )
        self.enc_norm_out = GroupNorm(chans[-1])
        self.enc_mid = Conv2d(chans[-1], chans[-1], 3, rng)
        self.to_mean = Conv2d(chans[-1], config.latent_channels, 1, rng)
        self.to_logvar = Conv2d(chans[-1], config.latent_channels, 1, rng)

        self.dec_in = Conv2d(config.latent_channels, chans[-1], 3, rng, bias=False)
        self.dec_norms = ModuleList(GroupNorm(chans[i + 1]) for i in reversed(range(config.n_stages)))
        self.dec_ups = ModuleList(
            Conv2d(chans[i + 1], chans[i], 3, rng, bias=False) for i in reversed(range(config.n_stages))
        )
        self.dec_norm_out = GroupNorm(chans[0])
        self.dec_out = Conv2d(chans[0], 3, 3, rng)

    def _check_image(self, x):
        s = self.config.image_size
        if x.shape[-3:] != (3, s, s):
            raise ShapeMismatchError(f"expected (N, 3, {s}, {s}) image batch, got {x.shape}")

    def encode(self, x):
        """Image batch -> (mean, logvar) latents, logvar clamped for safety."""
        self._check_image(x)
        h = self.enc_in(x)
        for norm, down in zip(self.enc_norms, self.enc_downs):
            h = down(tg.silu(norm(h)))
        h = self.enc_mid(tg.silu(self.enc_norm_out(h)))
        mean = self.to_mean(h)
        logvar = tg.clip(self.to_logvar(h), self.config.logvar_min, self.config.logvar_max)
        return mean, logvar

    def sample(self, mean, logvar, noise):
        """Reparameterized draw: mean + exp(logvar/2) * noise (noise passed in)."""
        noise = noise if isinstance(noise, tg.Tensor) else tg.Tensor(np.asarray(noise, dtype=mean.data.dtype))
        if noise.shape != mean.shape:
            raise ShapeMismatchError(f"noise shape {noise.shape} != latent shape {mean.shape}")
        return tg.add(mean, tg.mul(tg.exp(tg.mul(logvar, 0.5)), noise))

    def decode(self, z):
        lat = self.config.latent_size
        if z.shape[-3:] != (self.config.latent_channels, lat, lat):
            raise ShapeMismatchError(
                f"expected (N, {self.config.latent_channels}, {lat}, {lat}) latents, got {z.shape}"
            )
        h = self.dec_in(z)
        for norm, up in zip(self.dec_norms, self.dec_ups):
            h = up(tg.upsample2x(tg.silu(norm(h))))
        return tg.tanh(self.dec_out(tg.silu(self.dec_norm_out(h))))

    @staticmethod
    def kl_term(mean, logvar):
        """Mean over all elements of the unit-Gaussian KL: 0.5 (mu^2 + sigma^2 - 1 - log sigma^2)."""
        return tg.mul(
            tg.tmean(tg.sub(tg.add(tg.mul(mean, mean), tg.exp(logvar)), tg.add(logvar, 1.0))),
            0.5,
        )
