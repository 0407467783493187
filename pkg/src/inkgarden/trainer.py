"""Staged training orchestration: VAE, base diffusion, adapter fine-tuning.

Each stage runs exactly ``total_steps`` optimizer steps with functionally
derived randomness (every draw is keyed by (seed, purpose, step)), so a run
resumed from any checkpoint reproduces the uninterrupted run bit for bit.
Checkpoints land every ``checkpoint_every`` steps together with a horizontal
grid of preview images; losses append to ``loss.csv``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tg
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import Pipeline, training_loss
from .errors import ConfigurationError, NonFiniteError
from .imageio import save_image
from .lora import (
    DEFAULT_TARGET_PATTERNS,
    LoraState,
    apply_adapter_arrays,
    inject,
    save_adapters,
)
from .nn import assign_names
from .optim import AdamState, adam_step
from .schedule import make_linear_schedule
from .text import TextEncoder, TextEncoderConfig, Vocabulary
from .unet import UNet, UNetConfig
from .vae import VAE, VaeConfig

STAGES = ("vae", "diffusion", "lora")

_STREAM_VAE_INIT = 0x7AE
_STREAM_TEXT_INIT = 0x7E87
_STREAM_UNET_INIT = 0x07E7
_STREAM_EPOCH = 0xE50C
_STREAM_NOISE = 0x901E


def derived_rng(seed, stream, step=0):
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFF, stream, step)))
    )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters shared by all stages (stored in checkpoints)."""

    image_size: int = 32
    downsample_factor: int = 4
    latent_channels: int = 4
    vae_base: int = 32
    unet_base: int = 32
    channel_mults: tuple = (1, 2)
    blocks_per_stage: int = 2
    d_text: int = 64
    text_length: int = 16
    text_blocks: int = 2
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


@dataclass
class TrainConfig:
    stage: str
    total_steps: int
    batch_size: int = 8
    lr: float = 1e-3
    lr_schedule: str = "warmup_cosine"  # or "constant"
    lr_warmup_fraction: float = 0.05
    lr_final_fraction: float = 0.05
    checkpoint_every: int = 500
    preview_count: int = 4
    preview_prompt: str = ""
    preview_steps: int = 8
    seed: int = 0
    # measured: at 1e-3 the posterior sigma rivals the signal and the
    # stochastic encode drowns the diffusion loss at low timesteps
    kl_coeff: float = 1e-5
    train_text: bool = True
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_patterns: tuple = DEFAULT_TARGET_PATTERNS
    log_wall_time: bool = False
    model: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage '{self.stage}' (expected one of {STAGES})")
        if self.checkpoint_every > self.total_steps:
            raise ConfigurationError("checkpoint_every must be <= total_steps")
        if self.preview_count < 1:
            raise ConfigurationError("preview_count must be >= 1")
        if self.lr_schedule not in ("constant", "warmup_cosine"):
            raise ConfigurationError(f"unknown lr schedule '{self.lr_schedule}'")

    def lr_at(self, step):
        """Per-step learning rate; a pure function of the step for exact resume."""
        if self.lr_schedule == "constant":
            return self.lr
        warmup = max(1, int(round(self.total_steps * self.lr_warmup_fraction)))
        if step <= warmup:
            return self.lr * step / warmup
        span = max(1, self.total_steps - warmup)
        progress = (step - warmup) / span
        floor = self.lr * self.lr_final_fraction
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainData:
    images: np.ndarray  # (N, 3, S, S) floats in [-1, 1]
    captions: list


def build_vae(spec: ModelSpec, seed):
    cfg = VaeConfig(
        image_size=spec.image_size,
        downsample_factor=spec.downsample_factor,
        latent_channels=spec.latent_channels,
        base_channels=spec.vae_base,
    )
    return assign_names(VAE(cfg, derived_rng(seed, _STREAM_VAE_INIT)), "vae")


def build_text_encoder(spec: ModelSpec, vocab_size, seed):
    cfg = TextEncoderConfig(
        vocab_size=vocab_size,
        length=spec.text_length,
        d_model=spec.d_text,
        n_blocks=spec.text_blocks,
    )
    return assign_names(TextEncoder(cfg, derived_rng(seed, _STREAM_TEXT_INIT)), "text")


def build_unet(spec: ModelSpec, seed):
    cfg = UNetConfig(
        latent_channels=spec.latent_channels,
        latent_size=spec.image_size // spec.downsample_factor,
        base_channels=spec.unet_base,
        channel_mults=spec.channel_mults,
        blocks_per_stage=spec.blocks_per_stage,
        d_text=spec.d_text,
        max_timestep=spec.timesteps,
    )
    return assign_names(UNet(cfg, derived_rng(seed, _STREAM_UNET_INIT)), "unet")


def build_schedule(spec: ModelSpec):
    return make_linear_schedule(spec.timesteps, spec.beta_start, spec.beta_end)


def compute_latent_scale(vae: VAE, images, batch=16):
    """1 / std of encoded latent means over the corpus (standardizes diffusion inputs)."""
    means = []
    with tg.no_grad():
        for i in range(0, len(images), batch):
            mean, _ = vae.encode(tg.Tensor(np.asarray(images[i : i + batch], dtype=np.float32)))
            means.append(mean.data)
    std = float(np.concatenate(means).std())
    if std <= 0:
        raise NonFiniteError("latent statistics collapsed (zero variance)")
    return 1.0 / std


def batch_indices(seed, step, batch_size, n):
    """Seeded epoch shuffles sliced into consecutive batches, derived per step."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = derived_rng(seed, _STREAM_EPOCH, epoch).permutation(n)
    take = perm[pos * batch_size : (pos + 1) * batch_size]
    if len(take) < batch_size:  # n < batch_size: cycle
        take = np.resize(perm, batch_size)
    return take


class TrainerSession:
    """One stage's models plus everything needed to step, checkpoint, resume."""

    def __init__(self, config: TrainConfig, data: TrainData, vocab: Vocabulary | None = None):
        self.config = config
        self.data = data
        self.spec = config.model
        self.vocab = vocab
        self.step = 0
        self.lora_state: LoraState | None = None
        self.latent_scale = 1.0
        self.vae = None
        self.text_encoder = None
        self.unet = None
        self.schedule = build_schedule(self.spec)
        self.optim = AdamState(lr=config.lr)

    # -- wiring ---------------------------------------------------------
    def init_vae_stage(self):
        self.vae = build_vae(self.spec, self.config.seed)
        return self

    def init_diffusion_stage(self, vae_ckpt_path):
        header, arrays = load_checkpoint(vae_ckpt_path)
        self.spec = ModelSpec.from_dict(header["model_spec"])
        self.schedule = build_schedule(self.spec)
        self.vae = build_vae(self.spec, header["seed"])
        self.vae.load_state_dict({k: v for k, v in arrays.items() if k.startswith("vae.")})
        for p in self.vae.parameters():
            p.trainable = False
        self.latent_scale = float(header["latent_scale"])
        if self.vocab is None:
            raise ConfigurationError("diffusion stage needs a vocabulary")
        self.text_encoder = build_text_encoder(self.spec, len(self.vocab), self.config.seed)
        self.unet = build_unet(self.spec, self.config.seed)
        return self

    def init_lora_stage(self, base_ckpt_path):
        pipeline, header = load_pipeline(base_ckpt_path)
        if header["stage"] != "diffusion":
            raise ConfigurationError(f"lora stage expects a diffusion checkpoint, got '{header['stage']}'")
        self.spec = ModelSpec.from_dict(header["model_spec"])
        self.schedule = pipeline.schedule
        self.vae = pipeline.vae
        self.text_encoder = pipeline.text_encoder
        self.unet = pipeline.unet
        self.vocab = pipeline.vocab
        self.latent_scale = pipeline.latent_scale
        self.lora_state = inject(
            self.unet,
            "unet",
            patterns=self.config.lora_patterns,
            rank=self.config.lora_rank,
            alpha=self.config.lora_alpha,
            seed=self.config.seed,
        )
        # base text/vae parameters freeze alongside the unet base
        for p in self.vae.parameters() + self.text_encoder.parameters():
            p.trainable = False
        return self

    # -- shared ----------------------------------------------------------
    def pipeline(self):
        return Pipeline(self.vae, self.text_encoder, self.unet, self.schedule, self.vocab, self.latent_scale)

    def trainable_params(self):
        if self.config.stage == "vae":
            return self.vae.parameters()
        params = self.unet.parameters() + self.text_encoder.parameters()
        return [p for p in params if p.trainable]

    def _models(self):
        models = []
        if self.vae is not None:
            models.append(self.vae)
        if self.text_encoder is not None:
            models.append(self.text_encoder)
        if self.unet is not None:
            models.append(self.unet)
        return models

    def _loss_step(self):
        cfg = self.config
        idx = batch_indices(cfg.seed, self.step, cfg.batch_size, len(self.data.images))
        images = self.data.images[idx]
        rng = derived_rng(cfg.seed, _STREAM_NOISE, self.step)
        if cfg.stage == "vae":
            x = tg.Tensor(images)
            mean, logvar = self.vae.encode(x)
            noise = rng.standard_normal(mean.shape).astype(np.float32)
            z = self.vae.sample(mean, logvar, noise)
            recon = self.vae.decode(z)
            diff = tg.sub(recon, x)
            loss = tg.add(tg.tmean(tg.mul(diff, diff)), tg.mul(VAE.kl_term(mean, logvar), cfg.kl_coeff))
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"NaN VAE loss at step {self.step}")
            return loss
        prompts = [self.data.captions[i] for i in idx]
        train_text = cfg.train_text and cfg.stage == "diffusion"
        return training_loss(self.pipeline(), images, prompts, rng, train_text=train_text)

    def _previews(self, out_dir, step):
        cfg = self.config
        tiles = []
        if cfg.stage == "vae":
            with tg.no_grad():
                count = min(cfg.preview_count, len(self.data.images))
                x = tg.Tensor(self.data.images[:count])
                mean, _ = self.vae.encode(x)
                tiles = list(self.vae.decode(mean).data)
                while len(tiles) < cfg.preview_count:
                    tiles.append(tiles[-1])
        else:
            pipe = self.pipeline()
            base = cfg.seed ^ step
            for i in range(cfg.preview_count):
                tiles.append(pipe.sample(cfg.preview_prompt, steps=cfg.preview_steps, seed=base + i))
        grid = np.concatenate(tiles, axis=2)
        save_image(grid, Path(out_dir) / f"preview_step{step}.png")

    def checkpoint_header(self):
        cfg = self.config
        return {
            "format_version": 1,
            "stage": cfg.stage,
            "step": self.step,
            "seed": cfg.seed,
            "latent_scale": self.latent_scale,
            "model_spec": self.spec.to_dict(),
            "vocab": self.vocab.tokens if self.vocab is not None else None,
            "vocab_hash": self.vocab.digest() if self.vocab is not None else None,
            "rng": {"base_seed": cfg.seed, "step": self.step},
            "optim": {
                "lr": self.optim.lr,
                "beta1": self.optim.beta1,
                "beta2": self.optim.beta2,
                "epsilon": self.optim.epsilon,
                "step_count": self.optim.step_count,
            },
            "lora": (
                {
                    "rank": self.config.lora_rank,
                    "alpha": self.lora_state.adapters[0].alpha if self.lora_state.adapters else 0.0,
                    "targets": [a.target_name for a in self.lora_state.adapters],
                }
                if self.lora_state is not None
                else None
            ),
        }

    def collect_arrays(self):
        arrays = {}
        for model in self._models():
            arrays.update(model.state_dict())
        for name, m in self.optim.m.items():
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = self.optim.v[name]
        return arrays

    def save(self, path):
        save_checkpoint(path, self.checkpoint_header(), self.collect_arrays())

    def restore(self, path):
        header, arrays = load_checkpoint(path)
        if header["stage"] != self.config.stage:
            raise ConfigurationError(
                f"checkpoint stage '{header['stage']}' does not match config stage '{self.config.stage}'"
            )
        self.step = int(header["step"])
        self.latent_scale = float(header["latent_scale"])
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        for model in self._models():
            model.load_state_dict(params)
        self.optim.step_count = int(header["optim"]["step_count"])
        self.optim.m = {}
        self.optim.v = {}
        for name, arr in arrays.items():
            if name.startswith("adam.m."):
                self.optim.m[name[len("adam.m.") :]] = arr.copy()
            elif name.startswith("adam.v."):
                self.optim.v[name[len("adam.v.") :]] = arr.copy()
        return self


def train(session: TrainerSession, out_dir, resume_from=None, stop_at_step=None):
    """Run the stage to total_steps; returns (final checkpoint path, losses).

    Writes loss.csv (header ``step,loss,wall_ms``; wall_ms stays 0 unless
    ``log_wall_time`` trades byte-reproducible logs for real timings),
    cadence checkpoints with preview grids, and final.ckpt.  A non-finite
    loss aborts after writing a crash checkpoint.  ``stop_at_step``
    interrupts the run early (resume later with the same config).
    """
    cfg = session.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        session.restore(resume_from)
    params = session.trainable_params()
    loss_path = out_dir / "loss.csv"
    mode = "a" if (resume_from is not None and loss_path.exists()) else "w"
    last_step = cfg.total_steps if stop_at_step is None else min(stop_at_step, cfg.total_steps)
    losses = []
    with loss_path.open(mode, encoding="utf-8", newline="\n") as log:
        if mode == "w":
            log.write("step,loss,wall_ms\n")
        while session.step < last_step:
            t0 = time.perf_counter()
            session.step += 1
            try:
                loss = session._loss_step()
                for model in session._models():
                    model.zero_grad()
                loss.backward()
                session.optim.lr = cfg.lr_at(session.step)
                adam_step(params, session.optim)
            except NonFiniteError:
                session.save(out_dir / f"crash_step{session.step}.ckpt")
                raise
            value = loss.item()
            losses.append(value)
            wall = (time.perf_counter() - t0) * 1000.0 if cfg.log_wall_time else 0.0
            log.write(f"{session.step},{value!r},{wall:.3f}\n")
            if session.step % cfg.checkpoint_every == 0:
                session.save(out_dir / f"ckpt_step{session.step}.ckpt")
                session._previews(out_dir, session.step)
    if session.step < cfg.total_steps:  # interrupted; resume later with the same config
        stop_path = out_dir / f"interrupt_step{session.step}.ckpt"
        session.save(stop_path)
        return stop_path, losses
    if cfg.stage == "vae":
        session.latent_scale = compute_latent_scale(session.vae, session.data.images)
    final_path = out_dir / "final.ckpt"
    session.save(final_path)
    if session.lora_state is not None:
        save_adapters(session.lora_state, out_dir / "adapters.lora")
    return final_path, losses


def load_pipeline(ckpt_path):
    """Rebuild a full sampling pipeline from a diffusion/lora checkpoint."""
    header, arrays = load_checkpoint(ckpt_path)
    spec = ModelSpec.from_dict(header["model_spec"])
    seed = int(header["seed"])
    vae = build_vae(spec, seed)
    vocab = Vocabulary(header["vocab"][4:]) if header.get("vocab") else None
    if vocab is None:
        raise ConfigurationError(f"{ckpt_path} has no vocabulary; was it a VAE-only checkpoint?")
    text_encoder = build_text_encoder(spec, len(vocab), seed)
    unet = build_unet(spec, seed)
    lora_meta = header.get("lora")
    if lora_meta:
        entries = [
            {
                "target_name": t,
                "rank": lora_meta["rank"],
                "alpha": lora_meta["alpha"],
                "A": arrays[f"{t[: -len('.weight')]}.lora_A"],
                "B": arrays[f"{t[: -len('.weight')]}.lora_B"],
            }
            for t in lora_meta["targets"]
        ]
        apply_adapter_arrays(unet, "unet", entries)
    vae.load_state_dict({k: v for k, v in arrays.items() if k.startswith("vae.")})
    text_encoder.load_state_dict({k: v for k, v in arrays.items() if k.startswith("text.")})
    unet.load_state_dict({k: v for k, v in arrays.items() if k.startswith("unet.")})
    schedule = build_schedule(spec)
    pipeline = Pipeline(vae, text_encoder, unet, schedule, vocab, float(header["latent_scale"]))
    return pipeline, header
