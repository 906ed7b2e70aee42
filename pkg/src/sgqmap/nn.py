"""Small neural-net building blocks on top of the tensor engine.

Parameters are owned by a flat ``ParamStore`` (name -> Tensor) so checkpoints
and the optimizer see one namespace.  Initialization is deterministic given
the store's rng.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Flat parameter namespace with seeded initialization helpers."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        shape = shape if shape is not None else (fan_in, fan_out)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def constant(self, name: str, data) -> Tensor:
        return self.add(name, np.asarray(data))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def items(self):
        return self.params.items()

    def total_bytes(self) -> int:
        return sum(p.data.nbytes for p in self.params.values())


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True):
        self.w = store.xavier(f"{name}.w", d_in, d_out)
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class MLP:
    """Fully connected stack with relu between layers (none after the last)."""

    def __init__(self, store: ParamStore, name: str, dims: list[int]):
        self.layers = [Linear(store, f"{name}.{i}", dims[i], dims[i + 1])
                       for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = T.relu(x)
        return x


class LayerNorm:
    """Layer norm over the last axis with learnable gain and shift."""

    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.constant(f"{name}.gain", np.ones(dim))
        self.shift = store.zeros(f"{name}.shift", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x, axis=-1), self.gain), self.shift)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(L, D) -> (heads, L, D/heads)."""
    L, D = x.shape
    dh = D // heads
    return T.transpose(T.reshape(x, (L, heads, dh)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(heads, L, dh) -> (L, heads*dh)."""
    h, L, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (L, h * dh))


class MultiHeadAttention:
    """Standard multi-head dot-product attention over 2-D (length, dim) inputs.

    ``self_attention`` tags the score matrices for the allocation meter.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.wk = Linear(store, f"{name}.k", dim, dim)
        self.wv = Linear(store, f"{name}.v", dim, dim)
        self.wo = Linear(store, f"{name}.o", dim, dim)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 self_attention: bool = False) -> Tensor:
        q = split_heads(self.wq(query), self.heads)
        k = split_heads(self.wk(key), self.heads)
        v = split_heads(self.wv(value), self.heads)
        attended = T.scaled_dot_attention(q, k, v, is_self_attention=self_attention)
        return self.wo(merge_heads(attended))


def sinusoidal_embed(coords: Tensor, dim: int, temperature: float = 20.0) -> Tensor:
    """Sinusoidal embedding of scalars in [0, 1] into ``dim`` values each.

    coords: (..., K) -> (..., K*dim), one dim-sized block per input scalar,
    blocks concatenated in input order (x block first, then y, ...).  Within a
    block, even slots are sines and odd slots are cosines of geometrically
    spaced frequencies.  At coordinate 0 the sines are 0 and the cosines 1.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim per coordinate must be even, got {dim}")
    half = dim // 2
    # frequencies are constants: no gradient path through them
    k = np.arange(half, dtype=np.float64)
    inv_freq = (2.0 * math.pi) / np.power(float(temperature), 2.0 * k / dim)
    blocks = []
    num_coords = coords.shape[-1]
    for i in range(num_coords):
        scalar = coords[..., i:i + 1]                      # (..., 1)
        angles = T.mul(scalar, Tensor(inv_freq.astype(scalar.dtype)))  # (..., half)
        blocks.append(_interleave_sin_cos(angles))
    return T.concat(blocks, axis=-1)


def _interleave_sin_cos(angles: Tensor) -> Tensor:
    # slot order per frequency: (sin0, cos0, sin1, cos1, ...)
    s = _expand_last(T.sin(angles))
    c = _expand_last(T.cos(angles))
    stacked = T.concat([s, c], axis=-1)  # (..., half, 2)
    shape = angles.shape[:-1] + (angles.shape[-1] * 2,)
    return T.reshape(stacked, shape)


def _expand_last(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape + (1,))
