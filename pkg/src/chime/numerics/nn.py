"""Neural building blocks on top of the autodiff tensor.

Layers are plain data: an MLP is a list of ``(weight, bias, activation)``
triples, attention and GRU cells are small dicts of named tensors. Parameter
creation goes through a :class:`ParamStore` so checkpointing and the
optimizer see a single ordered namespace.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from chime.numerics import tensor as T
from chime.numerics.optim import ParamStore
from chime.numerics.rng import Rng
from chime.numerics.tensor import ShapeError, Tensor

ACTIVATIONS = {
    "relu": T.relu,
    "gelu": T.gelu,
    "identity": T.identity,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
}

Layer = tuple  # (weight Tensor[in×out], bias Tensor[out], activation name)


class ConfigurationError(ValueError):
    """Raised for inconsistent layer/model configuration."""


def glorot(rng: Rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    scale = gain * math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal((fan_in, fan_out), scale=scale)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = T.matmul(x, weight)
    return out if bias is None else out + bias


def init_mlp(store: ParamStore, prefix: str, dims: Sequence[int], rng: Rng,
             activation: str = "gelu", final_activation: str = "identity",
             final_gain: float = 1.0) -> list[Layer]:
    """Create an MLP ``dims[0] -> ... -> dims[-1]`` and register its weights."""
    layers: list[Layer] = []
    n = len(dims) - 1
    for i in range(n):
        act = final_activation if i == n - 1 else activation
        gain = final_gain if i == n - 1 else 1.0
        w = store.add(f"{prefix}.{i}.w", glorot(rng, dims[i], dims[i + 1], gain))
        b = store.add(f"{prefix}.{i}.b", np.zeros(dims[i + 1]))
        layers.append((w, b, act))
    return layers


def mlp_forward(layers: Sequence[Layer], x) -> Tensor:
    h = T.as_tensor(x)
    for i, (w, b, act) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise ConfigurationError(
                f"layer {i} expects input width {w.shape[0]}, got {h.shape[-1]}")
        if act not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {act!r}")
        h = ACTIVATIONS[act](linear(h, w, b))
    return h


def mlp_from_store(store: ParamStore, prefix: str, activation: str = "gelu",
                   final_activation: str = "identity") -> list[Layer]:
    """Rebuild an MLP layer list from weights registered under ``prefix``."""
    layers = []
    i = 0
    while f"{prefix}.{i}.w" in store:
        i += 1
    for j in range(i):
        act = final_activation if j == i - 1 else activation
        layers.append((store[f"{prefix}.{j}.w"], store[f"{prefix}.{j}.b"], act))
    if not layers:
        raise ConfigurationError(f"no MLP registered under {prefix!r}")
    return layers


# -- attention ------------------------------------------------------------
def init_attention(store: ParamStore, prefix: str, d_model: int, rng: Rng,
                   d_query: int | None = None, d_kv: int | None = None,
                   out_gain: float = 1.0) -> dict[str, Tensor]:
    d_query = d_query or d_model
    d_kv = d_kv or d_model
    return {
        "wq": store.add(f"{prefix}.wq", glorot(rng, d_query, d_model)),
        "bq": store.add(f"{prefix}.bq", np.zeros(d_model)),
        "wk": store.add(f"{prefix}.wk", glorot(rng, d_kv, d_model)),
        "bk": store.add(f"{prefix}.bk", np.zeros(d_model)),
        "wv": store.add(f"{prefix}.wv", glorot(rng, d_kv, d_model)),
        "bv": store.add(f"{prefix}.bv", np.zeros(d_model)),
        "wo": store.add(f"{prefix}.wo", glorot(rng, d_model, d_model, out_gain)),
        "bo": store.add(f"{prefix}.bo", np.zeros(d_model)),
    }


def attention_from_store(store: ParamStore, prefix: str) -> dict[str, Tensor]:
    return {k: store[f"{prefix}.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = x.transpose(axes)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def multi_head_attention(q, k, v, heads: int, params: dict[str, Tensor]) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads with in/out projections.

    ``q`` is ``[..., n_q, d_q]``; ``k`` and ``v`` are ``[..., n_k, d_kv]``.
    Returns ``[..., n_q, d_model]``.
    """
    d_model = params["wo"].shape[0]
    if heads < 1 or d_model % heads:
        raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} disagree on length")
    qh = _split_heads(linear(q, params["wq"], params["bq"]), heads)
    kh = _split_heads(linear(k, params["wk"], params["bk"]), heads)
    vh = _split_heads(linear(v, params["wv"], params["bv"]), heads)
    scale = 1.0 / math.sqrt(d_model // heads)
    scores = T.matmul(qh, T.swap_last(kh)) * scale
    attn = T.softmax(scores, axis=-1)
    ctx = _merge_heads(T.matmul(attn, vh))
    return linear(ctx, params["wo"], params["bo"])


# -- GRU ------------------------------------------------------------------
def init_gru(store: ParamStore, prefix: str, d_in: int, d_h: int, rng: Rng) -> dict[str, Tensor]:
    """Fused gate weights, column blocks ordered (reset, update, candidate)."""
    bound = 1.0 / math.sqrt(d_h)
    return {
        "wx": store.add(f"{prefix}.wx", rng.uniform((d_in, 3 * d_h), -bound, bound)),
        "bx": store.add(f"{prefix}.bx", rng.uniform(3 * d_h, -bound, bound)),
        "wh": store.add(f"{prefix}.wh", rng.uniform((d_h, 3 * d_h), -bound, bound)),
        "bh": store.add(f"{prefix}.bh", rng.uniform(3 * d_h, -bound, bound)),
    }


def gru_cell(params: dict[str, Tensor], x, h) -> Tensor:
    d_h = params["wh"].shape[0]
    gx = linear(x, params["wx"], params["bx"])
    gh = linear(h, params["wh"], params["bh"])
    r = T.sigmoid(gx[..., :d_h] + gh[..., :d_h])
    z = T.sigmoid(gx[..., d_h:2 * d_h] + gh[..., d_h:2 * d_h])
    n = T.tanh(gx[..., 2 * d_h:] + r * gh[..., 2 * d_h:])
    return (1.0 - z) * n + z * h


def gru_forward(params: dict[str, Tensor], sequence, h0=None) -> Tensor:
    """Run the recurrence over ``sequence`` ``[..., L, d_in]``; returns ``[..., L, d_h]``."""
    seq = T.as_tensor(sequence)
    d_in = params["wx"].shape[0]
    d_h = params["wh"].shape[0]
    if seq.shape[-1] != d_in:
        raise ShapeError(f"GRU expects input width {d_in}, got sequence {seq.shape}")
    if h0 is None:
        h = Tensor(np.zeros(seq.shape[:-2] + (d_h,)))
    else:
        h = T.as_tensor(h0)
        if h.shape[-1] != d_h:
            raise ShapeError(f"GRU hidden width {d_h} but h0 has shape {h.shape}")
    states = []
    for t in range(seq.shape[-2]):
        h = gru_cell(params, seq[..., t, :], h)
        states.append(h)
    return T.stack(states, axis=-2)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style position embedding of integer diffusion steps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
