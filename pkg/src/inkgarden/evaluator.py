"""Contrastive dual encoder scoring text-image and image-image similarity.

A small conv tower and a small text transformer embed into a shared space;
both towers L2-normalize their outputs, so similarity is a plain dot product
clamped to [-1, 1].  Training uses the symmetric in-batch softmax objective
with a learned temperature.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tg
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, NonFiniteError
from .nn import Conv2d, Downsample, GroupNorm, Linear, Module, assign_names
from .optim import AdamState, adam_step
from .tensor import Parameter, Tensor
from .text import TextEncoder, TextEncoderConfig, Vocabulary, tokenize


@dataclass(frozen=True)
class DualEncoderConfig:
    vocab_size: int
    d_emb: int = 32
    image_size: int = 32
    image_channels: tuple = (16, 32, 48, 64)
    text_length: int = 16
    text_d_model: int = 48
    text_blocks: int = 2
    init_temperature: float = 0.07

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["image_channels"] = tuple(d["image_channels"])
        return cls(**d)


def _normalize(x):
    """Unit-norm rows; a collapsed (zero-norm) embedding is a hard error."""
    norm_sq = tg.tsum(tg.mul(x, x), axis=-1, keepdims=True)
    if norm_sq.data.min() < 1e-24:
        raise NonFiniteError("zero-norm embedding during normalization")
    return tg.div(x, tg.sqrt(norm_sq))


class ImageTower(Module):
    """Conv stack into a flattened-feature projection.

    The head consumes the flattened final feature map rather than a global
    mean pool: per-sample normalization plus mean pooling leaves almost no
    between-sample variance, which lets contrastive training collapse both
    towers onto a single embedding.
    """

    def __init__(self, config: DualEncoderConfig, rng):
        super().__init__()
        ch = config.image_channels
        self.conv_in = Conv2d(3, ch[0], 3, rng, bias=False)
        self.norms = [GroupNorm(c) for c in ch[:-1]]
        self.downs = [
            Downsample(ch[i], ch[i + 1], rng, bias=(i == len(ch) - 2)) for i in range(len(ch) - 1)
        ]
        for i, (n, d) in enumerate(zip(self.norms, self.downs)):
            setattr(self, f"norm{i}", n)
            setattr(self, f"down{i}", d)
        spatial = config.image_size // (2 ** (len(ch) - 1))
        self.head = Linear(ch[-1] * spatial * spatial, config.d_emb, rng)

    def forward(self, images):
        h = self.conv_in(images)
        for norm, down in zip(self.norms, self.downs):
            h = down(tg.silu(norm(h)))
        flat = tg.reshape(h, (h.shape[0], -1))
        return self.head(flat)

    __call__ = forward


class DualEncoder(Module):
    def __init__(self, config: DualEncoderConfig, rng):
        super().__init__()
        self.config = config
        self.image_tower = ImageTower(config, rng)
        self.text_tower = TextEncoder(
            TextEncoderConfig(
                vocab_size=config.vocab_size,
                length=config.text_length,
                d_model=config.text_d_model,
                n_blocks=config.text_blocks,
            ),
            rng,
        )
        self.text_head = Linear(config.text_length * config.text_d_model, config.d_emb, rng)
        self.log_temp = Parameter(Tensor(np.array(np.log(config.init_temperature), dtype=tg.default_dtype())))

    def encode_image(self, images):
        images = images if isinstance(images, tg.Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        return _normalize(self.image_tower(images))

    def encode_text_ids(self, ids):
        # flattened positions feed the head for the same anti-collapse reason
        # as the image tower (pooling over mostly-<pad> positions is worse yet)
        tokens = self.text_tower(np.asarray(ids))
        flat = tg.reshape(tokens, (tokens.shape[0], -1))
        return _normalize(self.text_head(flat))

    def encode_text(self, prompts, vocab: Vocabulary):
        ids = np.stack([tokenize(p, vocab, self.config.text_length) for p in prompts])
        return self.encode_text_ids(ids)


def cosine_similarity(u, v):
    """Dot product of unit vectors, clamped to [-1, 1]; inputs must be unit norm.

    Identical inputs score exactly 1.0 (their mathematical cosine) rather than
    the rounded dot product of the float32 normalization.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, w in (("u", u), ("v", v)):
        n = np.linalg.norm(w)
        if abs(n - 1.0) > 1e-6:
            raise ConfigurationError(f"cosine_similarity expects unit vectors, |{name}| = {n}")
    if np.array_equal(u, v):
        return 1.0
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def _cross_entropy_diagonal(logits):
    """Mean of -log softmax(logits)[i, i] via a stable log-sum-exp."""
    m = logits.data.max(axis=-1, keepdims=True)  # constant shift, no gradient needed
    shifted = tg.sub(logits, Tensor(m))
    lse = tg.log(tg.tsum(tg.exp(shifted), axis=-1, keepdims=True))
    log_probs = tg.sub(shifted, lse)
    n = logits.shape[0]
    diag = tg.getitem(log_probs, (np.arange(n), np.arange(n)))
    return tg.neg(tg.tmean(diag))


def contrastive_loss(encoder: DualEncoder, images, ids):
    ie = encoder.encode_image(images)
    te = encoder.encode_text_ids(ids)
    inv_temp = tg.exp(tg.neg(encoder.log_temp.value))
    logits = tg.mul(tg.matmul(ie, tg.transpose(te, (1, 0))), inv_temp)
    loss_i = _cross_entropy_diagonal(logits)
    loss_t = _cross_entropy_diagonal(tg.transpose(logits, (1, 0)))
    return tg.mul(tg.add(loss_i, loss_t), 0.5)


@dataclass
class ContrastiveConfig:
    total_steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    d_emb: int = 32


def contrastive_train(images, captions, vocab: Vocabulary, config: ContrastiveConfig):
    """Train a dual encoder on (image, caption) pairs; seeded-deterministic.

    A batch whose captions are all identical cannot rank anything and is
    skipped with a warning.
    """
    if len(set(captions)) < 2:
        raise ConfigurationError("contrastive training needs at least 2 distinct captions")
    images = np.asarray(images, dtype=np.float32)
    enc_cfg = DualEncoderConfig(
        vocab_size=len(vocab),
        d_emb=config.d_emb,
        image_size=images.shape[-1],
    )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(config.seed, 0xD0A1))))
    encoder = assign_names(DualEncoder(enc_cfg, rng), "dual")
    ids = np.stack([tokenize(c, vocab, enc_cfg.text_length) for c in captions])
    state = AdamState(lr=config.lr)
    params = encoder.parameters()
    losses = []
    n = len(images)
    for step in range(config.total_steps):
        srng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=(config.seed, 0xBA7C, step)))
        )
        idx = srng.choice(n, size=min(config.batch_size, n), replace=False)
        batch_caps = [captions[i] for i in idx]
        if len(set(batch_caps)) == 1:
            warnings.warn(f"skipping degenerate batch at step {step}: all captions identical")
            continue
        loss = contrastive_loss(encoder, images[idx], ids[idx])
        encoder.zero_grad()
        loss.backward()
        adam_step(params, state)
        losses.append(loss.item())
    return encoder, losses


def evaluate(encoder: DualEncoder, vocab: Vocabulary, images, prompts, references=None, image_names=None):
    """Per-pair cosine report plus aggregates.

    `references`, when given, must pair 1:1 with `images` and adds the
    generated-vs-reference image cosine to each record.
    """
    if len(images) != len(prompts):
        raise ConfigurationError(f"arity mismatch: {len(images)} images vs {len(prompts)} prompts")
    if references is not None and len(references) != len(images):
        raise ConfigurationError(f"arity mismatch: {len(references)} references vs {len(images)} images")
    if image_names is None:
        image_names = [f"image_{i}" for i in range(len(images))]
    with tg.no_grad():
        img_emb = encoder.encode_image(np.stack(images)).data
        txt_emb = encoder.encode_text(prompts, vocab).data
        ref_emb = encoder.encode_image(np.stack(references)).data if references is not None else None
    records = []
    for i, (prompt, name) in enumerate(zip(prompts, image_names)):
        rec = {
            "prompt": prompt,
            "image": name,
            "text_image_cos": cosine_similarity(txt_emb[i], img_emb[i]),
            "image_image_cos": (
                cosine_similarity(img_emb[i], ref_emb[i]) if ref_emb is not None else None
            ),
        }
        records.append(rec)
    text_cos = [r["text_image_cos"] for r in records]
    aggregate = {
        "text_image_cos": {"mean": float(np.mean(text_cos)), "min": min(text_cos), "max": max(text_cos)},
    }
    if ref_emb is not None:
        img_cos = [r["image_image_cos"] for r in records]
        aggregate["image_image_cos"] = {
            "mean": float(np.mean(img_cos)),
            "min": min(img_cos),
            "max": max(img_cos),
        }
    return {"records": records, "aggregate": aggregate}


def retrieval_top1(encoder: DualEncoder, vocab: Vocabulary, images, captions, distractors=8, trials=50, seed=0):
    """Fraction of trials where the true caption out-ranks `distractors` others.

    Distractor captions are sampled distinct from the target's caption text,
    since duplicated captions would make the ranking ambiguous.
    """
    rng = np.random.default_rng(seed)
    with tg.no_grad():
        img_emb = encoder.encode_image(np.stack(images)).data
        txt_emb = encoder.encode_text(list(captions), vocab).data
    n = len(images)
    hits = 0
    for _ in range(trials):
        target = int(rng.integers(n))
        pool = [j for j in range(n) if captions[j] != captions[target]]
        chosen = rng.choice(len(pool), size=distractors, replace=False)
        candidates = [target] + [pool[int(c)] for c in chosen]
        scores = [float(np.dot(img_emb[target], txt_emb[c])) for c in candidates]
        if int(np.argmax(scores)) == 0:
            hits += 1
    return hits / trials


def save_dual_encoder(path, encoder: DualEncoder, vocab: Vocabulary):
    header = {
        "format_version": 1,
        "stage": "evaluator",
        "config": encoder.config.to_dict(),
        "vocab": vocab.tokens,
        "vocab_hash": vocab.digest(),
    }
    save_checkpoint(path, header, encoder.state_dict())


def load_dual_encoder(path):
    header, arrays = load_checkpoint(path)
    if header.get("stage") != "evaluator":
        raise ConfigurationError(f"{path} is not an evaluator checkpoint")
    config = DualEncoderConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"][4:])
    rng = np.random.default_rng(0)  # weights overwritten below
    encoder = assign_names(DualEncoder(config, rng), "dual")
    encoder.load_state_dict(arrays)
    return encoder, vocab
