"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an n-dimensional float array plus an optional
gradient slot.  Operations build a closure graph on the fly; calling
``backward()`` on a scalar result walks the graph in reverse topological
order and accumulates gradients into every tensor that requires them.

Two precision modes exist: float32 (training default) and float64 for
verification suites, switched with :func:`precision` — finite-difference
gradient comparisons are meaningless at float32 resolution.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    ConfigurationError,
    EmptyContextError,
    NonFiniteError,
    ShapeMismatchError,
)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily set the dtype used when tensors are created from lists/ints."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / sampling paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def check_finite(self, name="tensor"):
        """Raise :class:`NonFiniteError` if any element is NaN or Inf."""
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in {name}")
        return self

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        # Accumulation never mutates in place, so sharing `g` between parents is safe.
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ShapeMismatchError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatchError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward_fn = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def power(a, p):
    p = float(p)

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(a.data ** p, (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backward)


def log(a):
    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / out_data))

    return _node(out_data, (a,), backward)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def silu(a):
    """x * sigmoid(x), fused forward/backward."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

    return _node(out_data, (a,), backward)


def clip(a, lo, hi):
    """Clamp values; gradient passes only where lo < x < hi."""
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accumulate(g * inside)

    return _node(out_data, (a,), backward)


# -- reductions and shape ops ------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            ga = np.broadcast_to(g, a.data.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.broadcast_to(g, a.data.shape)
        a._accumulate(ga.astype(a.data.dtype, copy=True))

    return _node(np.asarray(out_data), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    old_shape = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward)


def _is_basic_index(idx):
    if isinstance(idx, (int, slice)) or idx is None or idx is Ellipsis:
        return True
    if isinstance(idx, tuple):
        return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in idx)
    return False


def getitem(a, idx):
    out_data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        if _is_basic_index(idx):
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        a._accumulate(ga)

    return _node(np.ascontiguousarray(out_data), (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def pad2d(a, p):
    """Zero-pad the last two axes; `p` is an int (all sides) or (top, bottom, left, right)."""
    top, bottom, left, right = (p, p, p, p) if isinstance(p, int) else p
    if top == bottom == left == right == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 2) + [(top, bottom), (left, right)]
    h, w = a.data.shape[-2], a.data.shape[-1]
    sl = tuple([slice(None)] * (a.data.ndim - 2) + [slice(top, top + h), slice(left, left + w)])

    def backward(g):
        a._accumulate(np.ascontiguousarray(g[sl]))

    return _node(np.pad(a.data, width), (a,), backward)


def upsample2x(a):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out_data = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        lead = g.shape[:-2]
        h, w = g.shape[-2] // 2, g.shape[-1] // 2
        a._accumulate(g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)))

    return _node(out_data, (a,), backward)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * out_data)

    return _node(out_data, (a,), backward)


def embedding(weight, ids):
    """Row lookup: weight[V, d] indexed by an integer id array."""
    ids = np.asarray(ids)
    out_data = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        weight._accumulate(gw)

    return _node(np.ascontiguousarray(out_data), (weight,), backward)


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None) or _DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return _node(np.matmul(a.data, b.data), (a, b), backward)


def attention(q, k, v):
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    Shapes (..., L_q, d), (..., L_k, d), (..., L_k, d_v); every row of the
    softmax matrix sums to 1.
    """
    if k.shape[-2] == 0:
        raise EmptyContextError("attention over a zero-length key sequence")
    d = q.shape[-1]
    if d <= 0:
        raise ShapeMismatchError("attention feature dimension must be positive")
    if k.shape[-1] != d:
        raise ShapeMismatchError(f"query dim {d} != key dim {k.shape[-1]}")
    if v.shape[-2] != k.shape[-2]:
        raise ShapeMismatchError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def conv2d(x, w, stride=1, padding=0):
    """2-d cross-correlation with zero padding.

    x: (C, H, W) or (N, C, H, W); w: (C_out, C_in, k, k) with k odd.
    Output spatial size is (H + 2*padding - k) / stride + 1, which must be a
    positive integer.
    """
    if w.data.ndim != 4 or w.data.shape[-1] != w.data.shape[-2]:
        raise ShapeMismatchError(f"kernel must be (C_out, C_in, k, k), got {w.data.shape}")
    k = w.data.shape[-1]
    if k % 2 != 1:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    squeeze = x.data.ndim == 3
    x4 = reshape(x, (1,) + x.data.shape) if squeeze else x
    n, c, h, wd = x4.data.shape
    if c != w.data.shape[1]:
        raise ShapeMismatchError(f"input channels {c} != kernel channels {w.data.shape[1]}: {x.data.shape} x {w.data.shape}")
    ho, rh = divmod(h + 2 * padding - k, stride)
    wo, rw = divmod(wd + 2 * padding - k, stride)
    ho += 1
    wo += 1
    if rh != 0 or rw != 0 or ho <= 0 or wo <= 0:
        raise ConfigurationError(
            f"conv2d output size not a positive integer: input {h}x{wd}, k={k}, stride={stride}, padding={padding}"
        )
    xp = pad2d(x4, padding)
    out = _conv2d_core(xp, w, stride, ho, wo)
    return reshape(out, out.data.shape[1:]) if squeeze else out


def _im2col(arr, k, stride, ho, wo):
    n, c = arr.shape[:2]
    sn, sc, sh, sw = arr.strides
    view = as_strided(
        arr,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(view).reshape(n, c * k * k, ho * wo)


def _conv2d_core(xp, w, stride, ho, wo):
    n, c, hp, wp = xp.data.shape
    co = w.data.shape[0]
    k = w.data.shape[-1]
    col = _im2col(xp.data, k, stride, ho, wo)
    w2 = w.data.reshape(co, c * k * k)
    out_data = np.matmul(w2, col).reshape(n, co, ho, wo)

    def backward(g):
        g3 = g.reshape(n, co, ho * wo)
        if w.requires_grad:
            gw = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
            w._accumulate(gw)
        if xp.requires_grad:
            if stride == 1:
                # grad wrt input is a full correlation of g with the flipped,
                # channel-swapped kernel: one im2col + BLAS matmul
                gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(
                    c, co * k * k
                )
                gcol = _im2col(gp, k, 1, hp, wp)
                xp._accumulate(np.matmul(wf, gcol).reshape(n, c, hp, wp))
            else:
                gcol = np.matmul(w2.T, g3).reshape(n, c, k, k, ho, wo)
                gxp = np.zeros_like(xp.data)
                for ki in range(k):
                    for kj in range(k):
                        gxp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += gcol[
                            :, :, ki, kj
                        ]
                xp._accumulate(gxp)

    return _node(out_data, (xp, w), backward)


# -- constructors ------------------------------------------------------

def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


class Parameter:
    """A named, optionally-trainable tensor attached to a model.

    Names are hierarchical paths like ``unet.down.0.attn.q.weight`` and are
    unique within a model; a parameter with ``trainable == False`` is never
    touched by the optimizer.
    """

    __slots__ = ("value", "name", "_trainable")

    def __init__(self, value, name="", trainable=True):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.name = name
        self._trainable = bool(trainable)
        self.value.requires_grad = self._trainable

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.value.requires_grad = self._trainable

    @property
    def data(self):
        return self.value.data

    @property
    def shape(self):
        return self.value.data.shape

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.shape}, trainable={self.trainable})"
