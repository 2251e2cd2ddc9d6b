"""Neural building blocks over :mod:`scnet.tensor`.

Layers are plain functions reading weights out of a :class:`ParameterStore`
under a name prefix; matching ``init_*`` functions create those weights.
Linear weights are stored input-major, ``x @ W + b``.
"""

from __future__ import annotations

import math

import numpy as np

from .params import ParameterStore
from .tensor import Tensor, gelu, layer_norm, masked_softmax

INIT_STD = 0.02
LN_EPS = 1e-12


def attention(query: Tensor, key: Tensor, value: Tensor, mask=None, num_heads: int = 1,
              return_weights: bool = False):
    """Scaled dot-product attention split over ``num_heads`` heads.

    ``query`` is ``(..., Lq, D)``, ``key`` ``(..., Lk, D)``, ``value``
    ``(..., Lk, Dv)``. ``mask`` is a boolean array broadcastable to
    ``(..., Lq, Lk)`` (True = may attend). Queries with no visible key get a
    zero output row.
    """
    if num_heads <= 0:
        raise ValueError("num_heads must be positive")
    *lead, lq, d = query.shape
    lk = key.shape[-2]
    dv = value.shape[-1]
    if key.shape[-1] != d:
        raise ValueError(f"query dim {d} != key dim {key.shape[-1]}")
    if value.shape[-2] != lk:
        raise ValueError(f"key length {lk} != value length {value.shape[-2]}")
    if d % num_heads or dv % num_heads:
        raise ValueError(f"dims ({d}, {dv}) not divisible by {num_heads} heads")
    h = num_heads
    dh = d // h

    def split(t, length, width):
        lead_t = t.shape[:-2]
        t = t.reshape(*lead_t, length, h, width // h)
        nd = t.ndim
        return t.swapaxes(nd - 3, nd - 2)  # (..., H, L, w)

    q, k, v = split(query, lq, d), split(key, lk, d), split(value, lk, dv)
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim >= 2:
            mask = np.expand_dims(mask, -3)
    w = masked_softmax(logits, mask)
    out = w @ v  # (..., H, Lq, dv/H)
    nd = out.ndim
    out = out.swapaxes(nd - 3, nd - 2).reshape(*out.shape[:-3], lq, dv)
    if return_weights:
        return out, w
    return out


def init_linear(store: ParameterStore, rng: np.random.Generator, name: str, d_in: int,
                d_out: int, bias: bool = True):
    store.add(f"{name}.weight", rng.normal(0.0, INIT_STD, size=(d_in, d_out)))
    if bias:
        store.add(f"{name}.bias", np.zeros(d_out))


def linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    y = x @ store[f"{name}.weight"]
    b = f"{name}.bias"
    if b in store:
        y = y + store[b]
    return y


def init_ln(store: ParameterStore, name: str, d: int):
    store.add(f"{name}.gamma", np.ones(d))
    store.add(f"{name}.beta", np.zeros(d))


def ln(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"], LN_EPS)


def init_mha(store, rng, name: str, d: int):
    for part in ("query", "key", "value", "out"):
        init_linear(store, rng, f"{name}.{part}", d, d)


def mha(store, name: str, x_q: Tensor, x_kv: Tensor, mask, num_heads: int) -> Tensor:
    q = linear(store, f"{name}.query", x_q)
    k = linear(store, f"{name}.key", x_kv)
    v = linear(store, f"{name}.value", x_kv)
    return linear(store, f"{name}.out", attention(q, k, v, mask, num_heads))


def init_ffn(store, rng, name: str, d: int, inner: int):
    init_linear(store, rng, f"{name}.fc1", d, inner)
    init_linear(store, rng, f"{name}.fc2", inner, d)


def ffn(store, name: str, x: Tensor) -> Tensor:
    return linear(store, f"{name}.fc2", gelu(linear(store, f"{name}.fc1", x)))


def init_transformer_layer(store, rng, name: str, d: int, inner: int):
    init_ln(store, f"{name}.ln_attn", d)
    init_mha(store, rng, f"{name}.attn", d)
    init_ln(store, f"{name}.ln_ffn", d)
    init_ffn(store, rng, f"{name}.ffn", d, inner)


def transformer_layer(store, name: str, x: Tensor, mask, num_heads: int) -> Tensor:
    """Pre-norm self-attention + feed-forward block with residuals."""
    h = ln(store, f"{name}.ln_attn", x)
    x = x + mha(store, f"{name}.attn", h, h, mask, num_heads)
    return x + ffn(store, f"{name}.ffn", ln(store, f"{name}.ln_ffn", x))


def key_mask_to_attn(key_mask: np.ndarray) -> np.ndarray:
    """(B, L) key-validity mask -> (B, 1, L), broadcast over queries."""
    return np.asarray(key_mask, dtype=bool)[:, None, :]
