"""Word-level vocabulary, tokenizer, and the small text transformer."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tg
from .errors import VocabularyError
from .nn import Attention, Embedding, FeedForward, LayerNorm, Module, ModuleList, sinusoidal_embedding

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Corpus-built word vocabulary; ids 0-3 are reserved specials."""

    def __init__(self, words):
        self.tokens = list(SPECIALS) + list(words)
        self.index = {w: i for i, w in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, captions):
        counts = Counter()
        for caption in captions:
            counts.update(_WORD_RE.findall(caption.lower()))
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ordered])

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(SPECIALS)] != list(SPECIALS):
            raise VocabularyError(f"{path} does not start with the reserved special tokens")
        return cls(lines[len(SPECIALS) :])

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def id(self, word):
        return self.index.get(word, UNK)

    def __len__(self):
        return len(self.tokens)

    def digest(self):
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def tokenize(text, vocab: Vocabulary, length: int):
    """Lowercase, split on whitespace/punctuation, map through the vocabulary.

    Output is always exactly `length` ids: <bos> first, <eos> after the last
    kept word (truncation keeps <eos> last), <pad> fill.
    """
    words = _WORD_RE.findall(text.lower())
    ids = [BOS] + [vocab.id(w) for w in words]
    ids = ids[: length - 1]
    ids.append(EOS)
    ids.extend([PAD] * (length - len(ids)))
    return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    length: int = 16
    d_model: int = 64
    n_blocks: int = 2
    mlp_mult: int = 4


class TextBlock(Module):
    def __init__(self, dim, mlp_mult, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_mult, rng)

    def forward(self, x):
        h = self.norm1(x)
        x = tg.add(x, self.attn(h, h))
        return tg.add(x, self.mlp(self.norm2(x)))

    __call__ = forward


class TextEncoder(Module):
    """Token + sinusoidal position embedding into full-attention blocks."""

    def __init__(self, config: TextEncoderConfig, rng):
        super().__init__()
        self.config = config
        self.embed = Embedding(config.vocab_size, config.d_model, rng)
        self._pos = sinusoidal_embedding(np.arange(config.length), config.d_model)
        self.blocks = ModuleList(TextBlock(config.d_model, config.mlp_mult, rng) for _ in range(config.n_blocks))
        self.norm = LayerNorm(config.d_model)

    def forward(self, ids):
        """ids: (N, L) integer array -> (N, L, d_model) embeddings."""
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != self.config.length:
            raise VocabularyError(f"expected (N, {self.config.length}) ids, got {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise VocabularyError(f"token id out of range [0, {self.config.vocab_size})")
        x = tg.add(self.embed(ids), tg.Tensor(self._pos))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    __call__ = forward
