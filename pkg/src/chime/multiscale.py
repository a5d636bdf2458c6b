"""Multi-scale condition encoder.

A window is averaged at several downsampling rates, each rate is split into a
moving-average trend and a seasonal remainder, and every (rate, component)
pair passes through its own MLP into a shared token space. The summed
representation is patched, autoencoded with one self-attention layer, split
into per-component views, and integrated with top-k softmax weights into the
condition tokens consumed by the denoiser.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from chime.numerics import ParamStore, Rng, Tensor
from chime.numerics import tensor as T
from chime.numerics.nn import (
    ConfigurationError,
    attention_from_store,
    init_attention,
    init_mlp,
    linear,
    mlp_forward,
    mlp_from_store,
    multi_head_attention,
)

MODES = ("full", "average-weight", "no-multiscale", "original")


def default_rates(L: int) -> list[int]:
    rates = [1, 2, 4] if L < 96 else [1, 4, 24]
    return [s for s in rates if s <= L]


@dataclass
class ScaleConfig:
    rates: list[int] = field(default_factory=lambda: [1, 2, 4])
    trend_window: int = 5
    patch_size: int = 4
    k: int = 3
    d_model: int = 64
    tokens: int = 8
    heads: int = 4
    hidden: int = 64
    mode: str = "full"

    @property
    def n_components(self) -> int:
        return 2 * len(self.rates)

    def validate(self, L: int) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown multiscale mode {self.mode!r}; choose from {MODES}")
        if not self.rates or any(s < 1 or s > L for s in self.rates):
            raise ConfigurationError(f"downsampling rates {self.rates} must lie in [1, L={L}]")
        if self.trend_window < 1 or self.trend_window % 2 == 0:
            raise ConfigurationError(f"trend_window must be a positive odd integer, got {self.trend_window}")
        if self.mode == "full" and not 1 <= self.k <= self.n_components:
            raise ConfigurationError(f"k={self.k} exceeds the {self.n_components} decomposed components")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.patch_size < 1 or self.tokens < 1:
            raise ConfigurationError("patch_size and tokens must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionVector:
    """Condition tokens ``[B, tokens, d_model]`` plus the integration weights."""

    tokens: Tensor
    weights: np.ndarray  # [B, k] kept weights, renormalised
    indices: np.ndarray  # [B, k] component index of each kept weight
    hallucinated: bool = False
    warning: str | None = None

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def detach(self) -> ConditionVector:
        return ConditionVector(self.tokens.detach(), self.weights, self.indices, self.hallucinated, self.warning)

    def select(self, idx) -> ConditionVector:
        idx = np.asarray(idx)
        return ConditionVector(Tensor(self.tokens.data[idx]), self.weights[idx], self.indices[idx],
                               self.hallucinated, self.warning)


@dataclass
class AggregateRepr:
    A: Tensor
    A_hat: Tensor
    component_views: Tensor  # [B, 2N, tokens, d_model]


# -- parameter-free pieces -------------------------------------------------
def downsample(X, s: int) -> Tensor:
    """Non-overlapping means of ``s`` consecutive rows; the remainder is dropped."""
    X = T.as_tensor(X)
    L = X.shape[-2]
    if not 1 <= s <= L:
        raise ConfigurationError(f"downsampling rate {s} must lie in [1, L={L}]")
    if s == 1:
        return X
    m = L // s
    head = X if m * s == L else X[..., : m * s, :]
    return head.reshape(*X.shape[:-2], m, s, X.shape[-1]).mean(axis=-2)


@lru_cache(maxsize=64)
def moving_average_matrix(m: int, window: int) -> np.ndarray:
    """``M`` with ``M @ x`` the centred moving average under edge replication."""
    half = window // 2
    M = np.zeros((m, m))
    for i in range(m):
        for j in range(i - half, i + half + 1):
            M[i, min(max(j, 0), m - 1)] += 1.0 / window
    M.setflags(write=False)
    return M


def effective_window(m: int, window: int) -> int:
    w = min(window, m)
    return w if w % 2 == 1 else w - 1


def trend_seasonal(X, trend_window: int) -> tuple[Tensor, Tensor]:
    X = T.as_tensor(X)
    m = X.shape[-2]
    w = effective_window(m, trend_window)
    trend = T.matmul(Tensor(moving_average_matrix(m, w)), X)
    return trend, X - trend


def topk_renormalize(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``k`` largest entries per row (ties to the lower index) and renormalise.

    Returns ``(indices [.., k], weights [.., k])``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} must lie in [1, {n}]")
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    kept = np.take_along_axis(probs, order, axis=-1)
    return order, kept / kept.sum(axis=-1, keepdims=True)


# -- parameters --------------------------------------------------------------
def init_params(store: ParamStore, cfg: ScaleConfig, L: int, d: int, rng: Rng, prefix: str = "ms") -> ParamStore:
    cfg.validate(L)
    width = cfg.tokens * cfg.d_model
    if cfg.mode == "no-multiscale":
        init_mlp(store, f"{prefix}.raw", [L * d, cfg.hidden, width], rng)
        return store
    if cfg.mode == "original":
        init_mlp(store, f"{prefix}.orig", [d, cfg.d_model], rng)
        return store
    for i, s in enumerate(cfg.rates):
        m = L // s
        for comp in ("trend", "seasonal"):
            init_mlp(store, f"{prefix}.agg.{i}.{comp}", [m * d, cfg.hidden, width], rng)
    p = cfg.patch_size * cfg.d_model
    init_mlp(store, f"{prefix}.ae.enc", [p, cfg.d_model, cfg.d_model], rng)
    init_attention(store, f"{prefix}.ae.attn", cfg.d_model, rng)
    init_mlp(store, f"{prefix}.ae.dec", [cfg.d_model, cfg.d_model, p], rng)
    init_mlp(store, f"{prefix}.decomp", [cfg.d_model, cfg.n_components * cfg.d_model], rng)
    store.add(f"{prefix}.weight.w", rng.normal((width, cfg.n_components), scale=1.0 / math.sqrt(width)))
    store.add(f"{prefix}.weight.b", np.zeros(cfg.n_components))
    init_mlp(store, f"{prefix}.integ", [cfg.d_model, cfg.d_model, cfg.d_model], rng)
    return store


def _flat(X: Tensor) -> Tensor:
    return X.reshape(*X.shape[:-2], X.shape[-2] * X.shape[-1])


# -- pipeline stages -------------------------------------------------------
def aggregate(X, cfg: ScaleConfig, params: ParamStore, prefix: str = "ms") -> Tensor:
    """Sum of per-(rate, component) MLP outputs, as ``[B, tokens, d_model]``."""
    X = T.as_tensor(X)
    total = None
    for i, s in enumerate(cfg.rates):
        trend, seasonal = trend_seasonal(downsample(X, s), cfg.trend_window)
        for comp, part in (("trend", trend), ("seasonal", seasonal)):
            name = f"{prefix}.agg.{i}.{comp}"
            if f"{name}.0.w" not in params:
                raise ConfigurationError(f"no aggregation MLP for rate {s} ({comp})")
            out = mlp_forward(mlp_from_store(params, name), _flat(part))
            total = out if total is None else total + out
    return total.reshape(*X.shape[:-2], cfg.tokens, cfg.d_model)


def autoencode(A, cfg: ScaleConfig, params: ParamStore, prefix: str = "ms") -> Tensor:
    A = T.as_tensor(A)
    lead = A.shape[:-2]
    n_tok, d_m = A.shape[-2], A.shape[-1]
    n_patch = -(-n_tok // cfg.patch_size)
    pad = n_patch * cfg.patch_size - n_tok
    if pad:
        A = T.pad_rows(A, 0, pad, axis=-2)
    patches = A.reshape(*lead, n_patch, cfg.patch_size * d_m)
    enc = mlp_forward(mlp_from_store(params, f"{prefix}.ae.enc"), patches)
    att = multi_head_attention(enc, enc, enc, cfg.heads, attention_from_store(params, f"{prefix}.ae.attn"))
    dec = mlp_forward(mlp_from_store(params, f"{prefix}.ae.dec"), enc + att)
    out = dec.reshape(*lead, n_patch * cfg.patch_size, d_m)
    return out[..., :n_tok, :] if pad else out


def decompose(A_hat, cfg: ScaleConfig, params: ParamStore, prefix: str = "ms") -> Tensor:
    """Split ``A_hat`` into ``2N`` component views ``[B, 2N, tokens, d_model]``."""
    A_hat = T.as_tensor(A_hat)
    lead = A_hat.shape[:-2]
    v = mlp_forward(mlp_from_store(params, f"{prefix}.decomp"), A_hat)
    v = v.reshape(*lead, cfg.tokens, cfg.n_components, cfg.d_model)
    nd = v.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return v.transpose(axes)


def component_logits(A_hat, params: ParamStore, prefix: str = "ms") -> Tensor:
    return linear(_flat(T.as_tensor(A_hat)), params[f"{prefix}.weight.w"], params[f"{prefix}.weight.b"])


def compute_weights(A_hat, cfg: ScaleConfig, params: ParamStore, prefix: str = "ms"):
    """Softmax over component logits, keep top-k, renormalise.

    Returns ``(indices [B, k], kept [B, k], dense Tensor [B, 2N])`` where the
    dense weights are zero outside the kept set and carry gradients.
    """
    n = cfg.n_components
    if cfg.mode == "average-weight":
        lead = T.as_tensor(A_hat).shape[:-2]
        dense = np.full(lead + (n,), 1.0 / n)
        idx = np.broadcast_to(np.arange(n), lead + (n,)).copy()
        return idx, dense.copy(), Tensor(dense)
    if not 1 <= cfg.k <= n:
        raise ConfigurationError(f"k={cfg.k} exceeds the {n} decomposed components")
    probs = T.softmax(component_logits(A_hat, params, prefix), axis=-1)
    idx, kept = topk_renormalize(probs.data, cfg.k)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    masked = probs * Tensor(mask)
    dense = masked / masked.sum(axis=-1, keepdims=True)
    return idx, kept, dense


def integrate(views, dense_weights, cfg: ScaleConfig, params: ParamStore, prefix: str = "ms") -> Tensor:
    """``sum_i w_i * MLP(view_i)`` with one MLP shared across components."""
    y = mlp_forward(mlp_from_store(params, f"{prefix}.integ"), views)
    w = T.as_tensor(dense_weights)
    w = w.reshape(*w.shape, 1, 1)
    return (y * w).sum(axis=-3)


def encode_condition(X, cfg: ScaleConfig, params: ParamStore, prefix: str = "ms") -> ConditionVector:
    X = T.as_tensor(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(1, *X.shape)
    B = X.shape[0]
    if cfg.mode == "no-multiscale":
        tokens = mlp_forward(mlp_from_store(params, f"{prefix}.raw"), _flat(X)).reshape(B, cfg.tokens, cfg.d_model)
        cv = ConditionVector(tokens, np.ones((B, 1)), np.zeros((B, 1), dtype=np.int64))
    elif cfg.mode == "original":
        tokens = mlp_forward(mlp_from_store(params, f"{prefix}.orig"), X)
        cv = ConditionVector(tokens, np.ones((B, 1)), np.zeros((B, 1), dtype=np.int64))
    else:
        A = aggregate(X, cfg, params, prefix)
        A_hat = autoencode(A, cfg, params, prefix)
        views = decompose(A_hat, cfg, params, prefix)
        idx, kept, dense = compute_weights(A_hat, cfg, params, prefix)
        cv = ConditionVector(integrate(views, dense, cfg, params, prefix), kept, idx)
    if squeeze:
        cv = ConditionVector(cv.tokens.reshape(*cv.tokens.shape[1:]), cv.weights[0], cv.indices[0])
    return cv


class MultiScaleEncoder:
    """Parameter holder binding a :class:`ScaleConfig` to its weights."""

    def __init__(self, cfg: ScaleConfig, L: int, d: int, rng: Rng | None = None,
                 store: ParamStore | None = None, prefix: str = "ms"):
        cfg.validate(L)
        self.cfg = cfg
        self.L = L
        self.d = d
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        if rng is not None:
            init_params(self.store, cfg, L, d, rng, prefix)

    @property
    def params(self) -> ParamStore:
        return self.store.subset(self.prefix + ".")

    def __call__(self, X) -> ConditionVector:
        return encode_condition(X, self.cfg, self.store, self.prefix)

    def aggregate_repr(self, X) -> AggregateRepr:
        A = aggregate(X, self.cfg, self.store, self.prefix)
        A_hat = autoencode(A, self.cfg, self.store, self.prefix)
        return AggregateRepr(A, A_hat, decompose(A_hat, self.cfg, self.store, self.prefix))
