"""Latent diffusion glue: the training loss, text-guided sampling, inpainting.

A :class:`Pipeline` bundles the frozen VAE, the text encoder, the U-Net and a
noise schedule, working in a standardized latent space (raw VAE latents are
multiplied by ``latent_scale`` before diffusion and divided by it before
decoding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .errors import ConfigurationError, DegenerateMaskError, NonFiniteError
from .samplers import SamplerRun, ddpm_step, pndm_step
from .schedule import NoiseSchedule, q_sample, sampling_indices, schedule_from_alpha_bars
from .text import TextEncoder, tokenize
from .unet import UNet
from .vae import VAE

_STREAM_INIT = 101
_STREAM_STEP_NOISE = 102
_STREAM_KNOWN = 103


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFF, stream))))


@dataclass
class InpaintTask:
    source: np.ndarray  # (3, S, S) floats in [-1, 1]
    mask: np.ndarray  # (S, S) of {0, 1}; 1 = regenerate, 0 = keep
    prompt: str


def latent_known_mask(mask, factor):
    """Downsample an image-space keep/regenerate mask to latent cells.

    A latent cell counts as known iff a strict majority of its f x f pixels
    are mask = 0.
    """
    s = mask.shape[0]
    blocks = mask.reshape(s // factor, factor, s // factor, factor)
    zeros = (blocks == 0).sum(axis=(1, 3))
    return zeros * 2 > factor * factor


class Pipeline:
    def __init__(self, vae: VAE, text_encoder: TextEncoder, unet: UNet, schedule: NoiseSchedule, vocab, latent_scale=1.0):
        self.vae = vae
        self.text_encoder = text_encoder
        self.unet = unet
        self.schedule = schedule
        self.vocab = vocab
        self.latent_scale = float(latent_scale)

    # -- text ------------------------------------------------------------
    def prompt_ids(self, prompts):
        length = self.text_encoder.config.length
        return np.stack([tokenize(p, self.vocab, length) for p in prompts])

    def encode_prompts(self, prompts):
        with tg.no_grad():
            return self.text_encoder(self.prompt_ids(prompts)).data

    # -- latents -----------------------------------------------------------
    def encode_image(self, image):
        """Image (3,S,S) -> scaled latent mean (1,c,h,w), no gradients."""
        with tg.no_grad():
            mean, _ = self.vae.encode(tg.Tensor(image[None].astype(np.float32)))
        return mean.data * self.latent_scale

    def decode_latent(self, z):
        with tg.no_grad():
            img = self.vae.decode(tg.Tensor((z / self.latent_scale).astype(np.float32)))
        return np.clip(img.data[0], -1.0, 1.0)

    # -- noise prediction ---------------------------------------------------
    def eps_fn(self, prompt, guidance_scale=1.0):
        """Noise-prediction closure over numpy latents at a fixed prompt.

        guidance_scale > 1 mixes in the empty-prompt (unconditional) branch:
        eps = eps_uncond + scale * (eps_cond - eps_uncond); at scale == 1 the
        unconditional branch is never computed.
        """
        cond = tg.Tensor(self.encode_prompts([prompt]))
        uncond = tg.Tensor(self.encode_prompts([""])) if guidance_scale > 1.0 else None

        def fn(x, t):
            zt = tg.Tensor(np.asarray(x, dtype=np.float32))
            with tg.no_grad():
                eps_c = self.unet(zt, t, cond).data
                if uncond is None:
                    return eps_c
                eps_u = self.unet(zt, t, uncond).data
            return eps_u + np.float32(guidance_scale) * (eps_c - eps_u)

        return fn

    # -- sampling -------------------------------------------------------------
    def sample_latent(self, prompt, steps, seed, sampler="pndm", guidance_scale=1.0):
        cfg = self.unet.config
        sched = self.schedule
        indices = sampling_indices(sched.T, steps)
        eps = self.eps_fn(prompt, guidance_scale)
        rng = _rng(seed, _STREAM_INIT)
        x = rng.standard_normal((1, cfg.latent_channels, cfg.latent_size, cfg.latent_size)).astype(np.float32)
        if sampler == "pndm":
            if steps < 4:
                raise ConfigurationError("pndm needs at least 4 steps (multistep warmup)")
            run = SamplerRun(sched, indices, eps, rng_seed=seed)
            for n, t in enumerate(indices):
                t_next = indices[n + 1] if n + 1 < len(indices) else 0
                x = pndm_step(run, x, eps(x, t), t, t_next)
        elif sampler == "ddpm":
            ascending = sorted(indices)
            coarse = schedule_from_alpha_bars(
                np.concatenate([[1.0], sched.alpha_bars[ascending]])
            )
            step_rng = _rng(seed, _STREAM_STEP_NOISE)
            for k in range(len(ascending), 0, -1):
                t_orig = ascending[k - 1]
                z = (
                    step_rng.standard_normal(x.shape).astype(np.float32)
                    if k > 1
                    else np.zeros_like(x)
                )
                x = ddpm_step(coarse, x, eps(x, t_orig), k, z)
        else:
            raise ConfigurationError(f"unknown sampler '{sampler}'")
        return x

    def sample(self, prompt, steps, seed, sampler="pndm", guidance_scale=1.0):
        """Text-to-image generation; deterministic in (prompt, steps, seed, sampler)."""
        z = self.sample_latent(prompt, steps, seed, sampler=sampler, guidance_scale=guidance_scale)
        return self.decode_latent(z)

    # -- inpainting ------------------------------------------------------------
    def inpaint(self, task: InpaintTask, steps, seed, sampler="pndm", guidance_scale=1.0, trace=None):
        """Regenerate only mask=1 pixels, re-noising the known region each step.

        The known latent region is overwritten with q_sample(z0_known, t_next,
        fresh noise) after every transition; mask=0 pixels of the decoded
        output are hard-pasted from the source.
        """
        mask = np.asarray(task.mask)
        s = self.vae.config.image_size
        if mask.shape != (s, s):
            raise DegenerateMaskError(f"mask shape {mask.shape} != ({s}, {s})")
        if not np.isin(mask, (0, 1)).all():
            raise DegenerateMaskError("mask values must be 0 or 1")
        if mask.min() == mask.max():
            raise DegenerateMaskError("mask must contain at least one 0 and one 1 cell")

        f = self.vae.config.downsample_factor
        known = latent_known_mask(mask, f)[None, None]  # (1,1,h,w)
        z0_known = self.encode_image(task.source)
        sched = self.schedule
        indices = sampling_indices(sched.T, steps)
        eps = self.eps_fn(task.prompt, guidance_scale)
        rng = _rng(seed, _STREAM_INIT)
        known_rng = _rng(seed, _STREAM_KNOWN)
        x = rng.standard_normal(z0_known.shape).astype(np.float32)

        def overwrite(x, t_next):
            if t_next >= 1:
                noise = known_rng.standard_normal(x.shape).astype(np.float32)
                renoised = q_sample(sched, z0_known, t_next, noise)
            else:
                noise = None
                renoised = z0_known
            out = np.where(known, renoised.astype(np.float32), x)
            if trace is not None:
                trace.append({"t_next": t_next, "noise": noise, "latent": out.copy(), "known": known.copy()})
            return out

        if sampler == "pndm":
            if steps < 4:
                raise ConfigurationError("pndm needs at least 4 steps (multistep warmup)")
            run = SamplerRun(sched, indices, eps, rng_seed=seed)
            for n, t in enumerate(indices):
                t_next = indices[n + 1] if n + 1 < len(indices) else 0
                x = pndm_step(run, x, eps(x, t), t, t_next)
                x = overwrite(x, t_next)
        elif sampler == "ddpm":
            ascending = sorted(indices)
            coarse = schedule_from_alpha_bars(np.concatenate([[1.0], sched.alpha_bars[ascending]]))
            step_rng = _rng(seed, _STREAM_STEP_NOISE)
            for k in range(len(ascending), 0, -1):
                t_orig = ascending[k - 1]
                z = step_rng.standard_normal(x.shape).astype(np.float32) if k > 1 else np.zeros_like(x)
                x = ddpm_step(coarse, x, eps(x, t_orig), k, z)
                x = overwrite(x, ascending[k - 2] if k > 1 else 0)
        else:
            raise ConfigurationError(f"unknown sampler '{sampler}'")

        out = self.decode_latent(x)
        keep = mask[None] == 0
        out = np.where(keep, task.source, out)
        return out.astype(np.float32)


def training_loss(pipeline: Pipeline, images, prompts, rng, train_text=True):
    """Noise-prediction MSE over one batch.

    Per element: a stochastic VAE encode gives z0 (scaled), t ~ Uniform{1..T},
    eps ~ N(0, I); the loss is the mean squared difference between eps and the
    U-Net's prediction at q_sample(z0, t, eps).  Gradients flow to the U-Net,
    to the text encoder when ``train_text``, and to any injected adapters.
    """
    sched = pipeline.schedule
    images = np.asarray(images, dtype=np.float32)
    batch = images.shape[0]
    with tg.no_grad():
        mean, logvar = pipeline.vae.encode(tg.Tensor(images))
        enc_noise = rng.standard_normal(mean.shape).astype(np.float32)
        z0 = pipeline.vae.sample(mean, logvar, enc_noise).data * np.float32(pipeline.latent_scale)

    ts = rng.integers(1, sched.T + 1, size=batch)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    x_t = np.stack([q_sample(sched, z0[i], int(ts[i]), eps[i]) for i in range(batch)])

    ids = pipeline.prompt_ids(prompts)
    if train_text:
        text = pipeline.text_encoder(ids)
    else:
        with tg.no_grad():
            text = tg.Tensor(pipeline.text_encoder(ids).data)

    eps_hat = pipeline.unet(tg.Tensor(x_t), ts, text)
    diff = tg.sub(eps_hat, tg.Tensor(eps))
    loss = tg.tmean(tg.mul(diff, diff))
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"NaN training loss (t={ts.tolist()}, prompts=0..{batch - 1} of this batch)")
    return loss
