"""Conditional DDPM core: schedule, forward process, denoiser, loss, samplers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from chime.multiscale import ConditionVector
from chime.numerics import AdamState, ParamStore, Rng, Tensor, adam_step
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
    sinusoidal_embedding,
)
from chime.numerics.optim import DEFAULT_LR, grad_norms

PARADIGMS = ("eps-attn", "data-reconstruction", "attn-original-condition")
POSTERIOR_MODES = ("standard", "sqrt-alpha-scaled")


class StateError(RuntimeError):
    """Model used before it was trained or restored."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by step ``t = 1..T``; index 0 holds the clean-data values."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def linear_schedule(T: int = 500, beta1: float = 1e-4, betaT: float = 5e-2) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0.0 < beta1 <= betaT < 1.0:
        raise ConfigurationError(f"need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={betaT}")
    beta = np.concatenate([[0.0], np.linspace(beta1, betaT, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(beta))


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    v = np.asarray(values[np.asarray(t)], dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def _check_t(t, schedule: NoiseSchedule) -> None:
    arr = np.asarray(t)
    if arr.size and (arr.min() < 1 or arr.max() > schedule.T):
        raise ConfigurationError(f"diffusion step must lie in [1, {schedule.T}], got {arr.min()}..{arr.max()}")


def forward_sample(X0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(alpha_bar_t) X0 + sqrt(1 - alpha_bar_t) eps``; ``t`` scalar or one per leading row."""
    _check_t(t, schedule)
    X0 = np.asarray(X0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != X0.shape:
        raise ConfigurationError(f"noise shape {eps.shape} differs from data shape {X0.shape}")
    ab = _per_sample(schedule.alpha_bar, t, X0.ndim)
    return np.sqrt(ab) * X0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(Xt, eps_hat, t, schedule: NoiseSchedule, mode: str = "standard") -> np.ndarray:
    if mode not in POSTERIOR_MODES:
        raise ConfigurationError(f"posterior_mean mode must be one of {POSTERIOR_MODES}, got {mode!r}")
    Xt = np.asarray(Xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    a = _per_sample(schedule.alpha, t, Xt.ndim)
    ab = _per_sample(schedule.alpha_bar, t, Xt.ndim)
    coef = (1.0 - a) / np.sqrt(1.0 - ab)
    if mode == "standard":
        return (Xt - coef * eps_hat) / np.sqrt(a)
    return np.sqrt(a) * Xt - coef / np.sqrt(a) * eps_hat


def skip_table(schedule: NoiseSchedule, target: str = "eps") -> np.ndarray:
    """Per-step skip coefficients: the exact prediction when the data signal vanishes."""
    if target == "eps":
        return np.sqrt(1.0 - schedule.alpha_bar)
    return np.sqrt(schedule.alpha_bar)


def linear_gain_table(schedule: NoiseSchedule, target: str = "eps", cap: float = 5.0) -> np.ndarray:
    """Per-step gains for the learned linear path.

    For noise targets, directions the data never occupy have optimal
    residual ``alpha_bar / sqrt(1 - alpha_bar) * x_t`` over the skip, so a
    single learned matrix scaled by this gain can remove off-manifold noise
    at every step. The gain is capped so that estimation noise in the
    matrix is not blown up at the smallest steps.
    """
    ab = schedule.alpha_bar
    gain = np.zeros_like(ab)
    if target == "eps":
        gain[1:] = np.minimum(ab[1:] / np.sqrt(1.0 - ab[1:]), cap)
    else:
        gain[1:] = np.sqrt(ab[1:])
    return gain


def eps_from_x0(Xt, x0_hat, t, schedule: NoiseSchedule) -> np.ndarray:
    ab = _per_sample(schedule.alpha_bar, t, np.ndim(Xt))
    return (np.asarray(Xt) - np.sqrt(ab) * np.asarray(x0_hat)) / np.sqrt(1.0 - ab)


def token_norm(tok: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free layer normalisation over the last axis; zero tokens stay zero."""
    centred = tok - tok.mean(axis=-1, keepdims=True)
    return centred / T.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)


# -- denoiser ----------------------------------------------------------------
@dataclass
class DenoiserConfig:
    L: int
    d: int
    cond_width: int = 64
    cond_tokens: int = 8
    hidden: int = 128
    tokens: int = 8
    time_dim: int = 32
    heads: int = 4
    activation: str = "gelu"

    def to_dict(self) -> dict:
        return asdict(self)


class Denoiser:
    """Noise predictor with cross-attention from hidden tokens to condition tokens.

    Flattened ``x_t`` and a sinusoidal step embedding pass through a two-layer
    MLP into ``tokens`` hidden tokens. With a condition, the tokens attend to
    the condition tokens (residual); without one the attention is skipped.
    A linear context layer summarises the flattened condition tokens (zero
    without a condition) and joins the tokens at the input of a two-layer
    MLP mapping back to ``[L, d]``. ``proj`` maps the
    condition tokens to a data-shaped mean used to start conditional sampling.

    ``skip[t] * x_t`` is added to the output when a skip table is given
    (``sqrt(1 - alpha_bar_t)`` for noise targets, ``sqrt(alpha_bar_t)`` for
    clean-data targets): the prediction that is exact for vanishing signal,
    so the MLP only learns the residual. With a ``gain`` table a learned
    linear map of ``x_t`` (zero at init) scaled by ``gain[t]`` is added too.
    """

    def __init__(self, cfg: DenoiserConfig, rng: Rng | None = None, store: ParamStore | None = None,
                 prefix: str = "den", target: str = "eps", skip: np.ndarray | None = None,
                 gain: np.ndarray | None = None):
        if cfg.hidden % cfg.heads:
            raise ConfigurationError(f"hidden={cfg.hidden} not divisible by heads={cfg.heads}")
        self.cfg = cfg
        self.prefix = prefix
        self.target = target
        self.skip = skip
        self.gain = gain
        self.store = store if store is not None else ParamStore()
        self.trained = False
        if rng is not None:
            self._init(rng)

    def _init(self, rng: Rng) -> None:
        c, p = self.cfg, self.prefix
        flat = c.L * c.d
        init_mlp(self.store, f"{p}.inp", [flat + c.time_dim, c.hidden, c.tokens * c.hidden], rng, c.activation)
        # condition paths start small so the conditional branch begins near the unconditional one
        init_attention(self.store, f"{p}.xattn", c.hidden, rng, d_query=c.hidden, d_kv=c.cond_width, out_gain=0.1)
        init_mlp(self.store, f"{p}.ctx", [c.cond_tokens * c.cond_width, c.hidden], rng, c.activation, final_gain=0.1)
        init_mlp(self.store, f"{p}.out", [c.tokens * c.hidden + c.hidden + c.time_dim, c.hidden, flat], rng,
                 c.activation)
        if self.gain is not None:
            self.store.add(f"{p}.lin.w", np.zeros((flat, flat)))
            self.store.add(f"{p}.lin.b", np.zeros(flat))
        self.store.add(f"{p}.proj.w", np.zeros((c.cond_tokens * c.cond_width, flat)))
        self.store.add(f"{p}.proj.b", np.zeros(flat))

    @property
    def params(self) -> ParamStore:
        return self.store.subset(self.prefix + ".")

    def _check_cond(self, cond: ConditionVector | Tensor) -> Tensor:
        """Validate the token width and normalise each token to zero mean, unit scale."""
        tok = cond.tokens if isinstance(cond, ConditionVector) else T.as_tensor(cond)
        if tok.shape[-1] != self.cfg.cond_width:
            raise ConfigurationError(
                f"condition token width {tok.shape[-1]} does not match model width {self.cfg.cond_width}")
        return token_norm(tok)

    def hidden_tokens(self, xt, t) -> Tensor:
        c = self.cfg
        xt = np.asarray(xt.data if isinstance(xt, Tensor) else xt, dtype=np.float64)
        B = xt.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        temb = Tensor(sinusoidal_embedding(t, c.time_dim))
        inp = T.concat([Tensor(xt.reshape(B, c.L * c.d)), temb], axis=-1)
        h = mlp_forward(mlp_from_store(self.store, f"{self.prefix}.inp", c.activation), inp)
        return h.reshape(B, c.tokens, c.hidden)

    def head(self, h: Tensor, cond_tokens: Tensor | None, xt=None, t=None) -> Tensor:
        """Map hidden tokens (optionally attending to a condition) to the prediction."""
        c = self.cfg
        B = h.shape[0]
        if cond_tokens is not None:
            att = multi_head_attention(h, cond_tokens, cond_tokens, c.heads,
                                       attention_from_store(self.store, f"{self.prefix}.xattn"))
            h = h + att
            flat_c = cond_tokens.reshape(B, c.cond_tokens * c.cond_width)
            ctx = mlp_forward(mlp_from_store(self.store, f"{self.prefix}.ctx", c.activation), flat_c)
        else:
            ctx = Tensor(np.zeros((B, c.hidden)))
        temb = Tensor(sinusoidal_embedding(np.broadcast_to(np.asarray(t if t is not None else 0), (B,)), c.time_dim))
        feats = T.concat([h.reshape(B, c.tokens * c.hidden), ctx, temb], axis=-1)
        out = mlp_forward(mlp_from_store(self.store, f"{self.prefix}.out", c.activation),
                          feats).reshape(B, c.L, c.d)
        if xt is None:
            return out
        xt = np.asarray(xt.data if isinstance(xt, Tensor) else xt, dtype=np.float64)
        tb = np.broadcast_to(np.asarray(t), (B,))
        if self.skip is not None:
            out = out + self.skip[tb].reshape(B, 1, 1) * xt
        if self.gain is not None:
            lin = linear(Tensor(xt.reshape(B, c.L * c.d)), self.store[f"{self.prefix}.lin.w"],
                         self.store[f"{self.prefix}.lin.b"])
            out = out + (lin * self.gain[tb].reshape(B, 1)).reshape(B, c.L, c.d)
        return out

    def __call__(self, xt, t, cond: ConditionVector | Tensor | None = None) -> Tensor:
        tok = None if cond is None else self._check_cond(cond)
        return self.head(self.hidden_tokens(xt, t), tok, xt, t)

    def project(self, cond: ConditionVector | Tensor) -> Tensor:
        tok = self._check_cond(cond)
        B = tok.shape[0]
        flat = tok.reshape(B, tok.shape[-2] * tok.shape[-1])
        out = linear(flat, self.store[f"{self.prefix}.proj.w"], self.store[f"{self.prefix}.proj.b"])
        return out.reshape(B, self.cfg.L, self.cfg.d)


# -- training ------------------------------------------------------------------
@dataclass
class TrainConfig:
    T: int = 500
    beta1: float = 1e-4
    betaT: float = 5e-2
    eta: float = 1.0
    lr: float = DEFAULT_LR
    batch_size: int = 128
    steps: int = 2000
    paradigm: str = "eps-attn"
    posterior_mean: str = "standard"
    proj_weight: float = 1.0
    ema_decay: float = 0.995
    seed: int = 0

    def validate(self) -> None:
        if self.eta < 0:
            raise ConfigurationError(f"eta must be >= 0, got {self.eta}")
        if self.paradigm not in PARADIGMS:
            raise ConfigurationError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.posterior_mean not in POSTERIOR_MODES:
            raise ConfigurationError(f"posterior_mean must be one of {POSTERIOR_MODES}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepLoss:
    total: float
    unconditional: float
    conditional: float
    projection: float

    @property
    def joint(self) -> float:
        """The noise-matching objective without the projection auxiliary."""
        return self.unconditional + self.conditional


def loss_terms(X0: np.ndarray, cond: ConditionVector | Tensor | None, model: Denoiser, cfg: TrainConfig,
               schedule: NoiseSchedule, t: np.ndarray, eps: np.ndarray):
    """Build the joint loss graph for given draws; returns ``(total Tensor, StepLoss)``."""
    xt = forward_sample(X0, t, eps, schedule)
    target = X0 if cfg.paradigm == "data-reconstruction" else eps
    h = model.hidden_tokens(xt, t)
    l_unc = T.mse(model.head(h, None, xt, t), target)
    total = l_unc
    l_cond = l_proj = None
    if cond is not None:
        tok = model._check_cond(cond)
        if cfg.eta > 0:
            l_cond = T.mse(model.head(h, tok, xt, t), target) * cfg.eta
            total = total + l_cond
        if cfg.proj_weight > 0:
            # X^T's marginal mean is sqrt(alpha_bar_T) X0
            goal = math.sqrt(schedule.alpha_bar[schedule.T]) * X0
            l_proj = T.mse(model.project(tok), goal) * cfg.proj_weight
            total = total + l_proj
    parts = StepLoss(total.item(), l_unc.item(),
                     0.0 if l_cond is None else l_cond.item(),
                     0.0 if l_proj is None else l_proj.item())
    return total, parts


def train_step(batch: np.ndarray, conditions, model: Denoiser, cfg: TrainConfig, schedule: NoiseSchedule,
               rng: Rng, store: ParamStore, state: AdamState, step: int = 0) -> StepLoss:
    """Draw ``t`` and ``eps`` per sample, backprop the joint loss, take one Adam step."""
    X0 = np.asarray(batch, dtype=np.float64)
    B = X0.shape[0]
    t = rng.integers(1, schedule.T + 1, B)
    eps = rng.normal(X0.shape)
    total, parts = loss_terms(X0, conditions, model, cfg, schedule, t, eps)
    if not math.isfinite(parts.total):
        total.backward()
        norms = grad_norms(store)
        raise NumericalAbort(
            f"non-finite loss at step {step}",
            {"step": step, "loss": repr(parts.total),
             "t_histogram": np.bincount(t, minlength=schedule.T + 1)[1:].tolist(),
             "grad_norms": {k: (v if math.isfinite(v) else repr(v)) for k, v in norms.items()}})
    total.backward()
    for name, p in store.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(store, state)
    return parts


# -- sampling ----------------------------------------------------------------
def _eps_hat(model: Denoiser, xt, t, cond_tokens, schedule) -> np.ndarray:
    h = model.hidden_tokens(xt, t)
    out = model.head(h, cond_tokens, xt, t).data
    if model.target == "x0":
        return eps_from_x0(xt, out, t, schedule)
    return out


def _reverse(model: Denoiser, x: np.ndarray, cond_tokens, schedule: NoiseSchedule, rng: Rng,
             mode: str) -> np.ndarray:
    for t in range(schedule.T, 0, -1):
        eps_hat = _eps_hat(model, x, t, cond_tokens, schedule)
        mu = posterior_mean(x, eps_hat, t, schedule, mode)
        if t > 1:
            x = mu + schedule.sigma[t] * rng.normal(x.shape)
        else:
            x = mu
    return x


def sample_unconditional(model: Denoiser, schedule: NoiseSchedule, shape, rng: Rng,
                         mode: str = "standard") -> np.ndarray:
    if not model.trained:
        raise StateError("sampling from an untrained denoiser")
    n, L, d = shape
    if (L, d) != (model.cfg.L, model.cfg.d):
        raise ConfigurationError(f"model generates [{model.cfg.L}, {model.cfg.d}] windows, asked for [{L}, {d}]")
    x = rng.normal((n, L, d))
    return _reverse(model, x, None, schedule, rng, mode)


def sample_conditional(model: Denoiser, cond: ConditionVector, schedule: NoiseSchedule, rng: Rng,
                       mode: str = "standard") -> np.ndarray:
    """One draw per condition row, started from ``N(proj(c), I)``."""
    if not model.trained:
        raise StateError("sampling from an untrained denoiser")
    tok = Tensor(model._check_cond(cond).data)
    mean = model.project(cond).data
    x = mean + rng.normal(mean.shape)
    return _reverse(model, x, tok, schedule, rng, mode)
