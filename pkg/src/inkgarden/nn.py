"""Model building blocks on top of the autodiff tensor.

Weight init follows the house convention: normal(0, 0.02) for linear/conv
weights, zeros for biases and norm shifts, ones for norm scales.  Every
parameter gets a unique hierarchical name once :func:`assign_names` runs on
the root module.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tg
from .errors import ConfigurationError
from .tensor import Parameter, Tensor

WEIGHT_STD = 0.02


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.value.grad = None

    def state_dict(self):
        """Arrays keyed by the globally assigned parameter names (see assign_names)."""
        out = {}
        for _, p in self.named_parameters():
            if not p.name:
                raise ConfigurationError("state_dict needs assign_names to have run first")
            out[p.name] = p.value.data
        return out

    def load_state_dict(self, arrays):
        """Load by assigned name; unknown extra keys in `arrays` are ignored."""
        for _, p in self.named_parameters():
            if p.name not in arrays:
                raise KeyError(f"missing parameter '{p.name}' in state dict")
            src = np.asarray(arrays[p.name])
            if src.shape != p.value.data.shape:
                raise ConfigurationError(
                    f"shape mismatch for '{p.name}': {src.shape} vs {p.value.data.shape}"
                )
            p.value.data = src.astype(p.value.data.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod):
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def assign_names(root: Module, root_name: str):
    """Set every parameter's hierarchical name; names must come out unique."""
    seen = set()
    for name, p in root.named_parameters(root_name):
        if name in seen:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        seen.add(name)
        p.name = name
    return root


def _init_weight(rng, shape):
    return Tensor(rng.normal(0.0, WEIGHT_STD, size=shape).astype(tg.default_dtype()))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(_init_weight(rng, (d_out, d_in)))
        self.bias = Parameter(tg.zeros((d_out,))) if bias else None
        self.adapter = None  # LoraAdapter slot, see lora.py

    def forward(self, x):
        out = tg.matmul(x, tg.transpose(self.weight.value, (1, 0)))
        if self.adapter is not None and not self.adapter.merged:
            a, b = self.adapter.A.value, self.adapter.B.value
            low = tg.matmul(x, tg.transpose(a, (1, 0)))
            out = tg.add(out, tg.mul(tg.matmul(low, tg.transpose(b, (1, 0))), self.adapter.scale))
        if self.bias is not None:
            out = tg.add(out, self.bias.value)
        return out

    __call__ = forward


class Conv2d(Module):
    """bias=False is for convs feeding straight into a normalization layer,
    where a per-channel constant would be cancelled exactly (a dead parameter)."""

    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(_init_weight(rng, (c_out, c_in, k, k)))
        self.bias = Parameter(tg.zeros((c_out,))) if bias else None

    def forward(self, x):
        out = tg.conv2d(x, self.weight.value, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = tg.add(out, tg.reshape(self.bias.value, (-1, 1, 1)))
        return out

    __call__ = forward


class Downsample(Module):
    """Strided 3x3 conv halving the spatial size exactly.

    A symmetric pad cannot make (H + 2p - k) divisible by stride 2 when H is
    even and k odd, so one extra zero row/column goes on the top/left before
    the stride-2 conv.
    """

    def __init__(self, c_in, c_out, rng, bias=True):
        super().__init__()
        self.weight = Parameter(_init_weight(rng, (c_out, c_in, 3, 3)))
        self.bias = Parameter(tg.zeros((c_out,))) if bias else None

    def forward(self, x):
        padded = tg.pad2d(x, (1, 0, 1, 0))
        out = tg.conv2d(padded, self.weight.value, stride=2, padding=0)
        if self.bias is not None:
            out = tg.add(out, tg.reshape(self.bias.value, (-1, 1, 1)))
        return out

    __call__ = forward


def _norm_groups(channels):
    # at least 4 channels per group, else per-channel shifts (bias, time
    # embedding) would be exactly cancelled by the group mean subtraction
    for g in (8, 4, 2, 1):
        if channels % g == 0 and channels // g >= 4:
            return g
    return 1


class GroupNorm(Module):
    def __init__(self, channels, groups=None, eps=1e-5):
        super().__init__()
        self.groups = _norm_groups(channels) if groups is None else groups
        if channels % self.groups != 0:
            raise ConfigurationError(f"{channels} channels not divisible into {self.groups} groups")
        self.eps = eps
        self.scale = Parameter(tg.ones((channels,)))
        self.shift = Parameter(tg.zeros((channels,)))

    def forward(self, x):
        n, c, h, w = x.shape
        g = self.groups
        xg = tg.reshape(x, (n, g, (c // g) * h * w))
        mu = tg.tmean(xg, axis=-1, keepdims=True)
        centred = tg.sub(xg, mu)
        var = tg.tmean(tg.mul(centred, centred), axis=-1, keepdims=True)
        normed = tg.div(centred, tg.sqrt(tg.add(var, self.eps)))
        out = tg.reshape(normed, (n, c, h, w))
        out = tg.mul(out, tg.reshape(self.scale.value, (-1, 1, 1)))
        return tg.add(out, tg.reshape(self.shift.value, (-1, 1, 1)))

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.scale = Parameter(tg.ones((dim,)))
        self.shift = Parameter(tg.zeros((dim,)))

    def forward(self, x):
        mu = tg.tmean(x, axis=-1, keepdims=True)
        centred = tg.sub(x, mu)
        var = tg.tmean(tg.mul(centred, centred), axis=-1, keepdims=True)
        normed = tg.div(centred, tg.sqrt(tg.add(var, self.eps)))
        return tg.add(tg.mul(normed, self.scale.value), self.shift.value)

    __call__ = forward


class Embedding(Module):
    def __init__(self, vocab_size, dim, rng):
        super().__init__()
        self.vocab_size = vocab_size
        self.weight = Parameter(_init_weight(rng, (vocab_size, dim)))

    def forward(self, ids):
        return tg.embedding(self.weight.value, np.asarray(ids))

    __call__ = forward


class Attention(Module):
    """Single-head scaled dot-product attention with q/k/v/out projections.

    Self-attention when the context equals the input sequence; cross-attention
    when the context carries text embeddings.  Projections are bias-free so a
    low-rank adapter fully describes any update to a site.
    """

    def __init__(self, d_q, d_ctx, rng):
        super().__init__()
        self.q = Linear(d_q, d_q, rng, bias=False)
        self.k = Linear(d_ctx, d_q, rng, bias=False)
        self.v = Linear(d_ctx, d_q, rng, bias=False)
        self.out = Linear(d_q, d_q, rng, bias=False)

    def forward(self, x, ctx):
        att = tg.attention(self.q(x), self.k(ctx), self.v(ctx))
        return self.out(att)

    __call__ = forward


class FeedForward(Module):
    def __init__(self, dim, mult, rng):
        super().__init__()
        self.up = Linear(dim, dim * mult, rng)
        self.down = Linear(dim * mult, dim, rng)

    def forward(self, x):
        return self.down(tg.silu(self.up(x)))

    __call__ = forward


def sinusoidal_embedding(positions, dim):
    """Classic sin/cos embedding of integer positions; returns (n, dim) floats."""
    positions = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2 == 1:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(tg.default_dtype())
