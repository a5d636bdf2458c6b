"""A trainable bundle of condition encoder, denoiser and schedule."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from chime.diffusion import (
    Denoiser,
    DenoiserConfig,
    StateError,
    StepLoss,
    TrainConfig,
    linear_schedule,
    sample_conditional,
    sample_unconditional,
    linear_gain_table,
    skip_table,
    train_step,
)
from chime.data import Normalizer
from chime.hallucination import HallucinationBank, hallucinate
from chime.multiscale import ConditionVector, MultiScaleEncoder, ScaleConfig
from chime.numerics import AdamState, EmaShadow, ParamStore, Rng, Tensor
from chime.numerics.checkpoint import CheckpointError, load_params, save_params
from chime.numerics.nn import ConfigurationError

TASKS = ("generation", "forecast")


@dataclass
class ModelSpec:
    """Shapes and hyperparameters fixing a model's parameter layout.

    ``L`` is the condition window length and ``h`` the generated length;
    generation uses ``h == L`` with the window conditioning itself.
    """

    L: int
    h: int
    d: int
    scale: ScaleConfig
    train: TrainConfig
    hidden: int = 128
    tokens: int = 8
    time_dim: int = 32
    task: str = "generation"
    center: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "generation" and self.h != self.L:
            raise ConfigurationError("generation requires h == L")
        self.train.validate()

    @property
    def encoder_mode(self) -> str:
        return "original" if self.train.paradigm == "attn-original-condition" else self.scale.mode

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scale"] = self.scale.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        d["scale"] = ScaleConfig(**d["scale"])
        d["train"] = TrainConfig(**d["train"])
        return cls(**d)


class ChimeModel:
    """Condition encoder + denoiser trained jointly, working on data scaled to [0, 1].

    Internally windows are mapped to [-1, 1]; forecasting windows are also
    shifted by the per-channel mean of their lookback when ``center`` is set.
    After training, parameters hold the moving average of the training
    trajectory when ``train.ema_decay > 0``.
    """

    def __init__(self, spec: ModelSpec, rng: Rng | None = None, normalizer: Normalizer | None = None):
        self.spec = spec
        self.normalizer = normalizer
        self.store = ParamStore()
        self.schedule = linear_schedule(spec.train.T, spec.train.beta1, spec.train.betaT)
        scfg = ScaleConfig(**{**spec.scale.to_dict(), "mode": spec.encoder_mode})
        self.scale_cfg = scfg
        init = rng.split("init") if rng is not None else None
        self.encoder = MultiScaleEncoder(scfg, spec.L, spec.d, rng=init.split("ms") if init else None,
                                         store=self.store)
        cond_tokens = spec.L if scfg.mode == "original" else scfg.tokens
        dcfg = DenoiserConfig(spec.h, spec.d, cond_width=scfg.d_model, cond_tokens=cond_tokens,
                              hidden=spec.hidden, tokens=spec.tokens, time_dim=spec.time_dim,
                              heads=scfg.heads)
        target = "x0" if spec.train.paradigm == "data-reconstruction" else "eps"
        self.denoiser = Denoiser(dcfg, rng=init.split("den") if init else None, store=self.store,
                                 target=target, skip=skip_table(self.schedule, target),
                                 gain=linear_gain_table(self.schedule, target))

    # -- data plumbing -------------------------------------------------------
    @property
    def trained(self) -> bool:
        return self.denoiser.trained

    def _split(self, windows01: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(condition, target, offset)`` in model space."""
        x = 2.0 * np.asarray(windows01, dtype=np.float64) - 1.0
        L = self.spec.L
        if self.spec.task == "generation":
            if x.shape[1] != L:
                raise ConfigurationError(f"model generates windows of length {L}, got {x.shape[1]}")
            return x, x, np.zeros((len(x), 1, x.shape[2]))
        if x.shape[1] != L + self.spec.h:
            raise ConfigurationError(
                f"forecast windows must hold L + h = {L + self.spec.h} steps, got {x.shape[1]}")
        cond, target = x[:, :L], x[:, L:]
        off = cond.mean(axis=1, keepdims=True) if self.spec.center else np.zeros((len(x), 1, x.shape[2]))
        return cond - off, target - off, off

    def _lookback(self, lookbacks01: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = 2.0 * np.asarray(lookbacks01, dtype=np.float64) - 1.0
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] != self.spec.L:
            raise ConfigurationError(f"lookback must hold L = {self.spec.L} steps, got {x.shape[1]}")
        off = x.mean(axis=1, keepdims=True) if self.spec.center else np.zeros((len(x), 1, x.shape[2]))
        return x - off, off

    # -- training --------------------------------------------------------------
    def fit(self, windows01: np.ndarray, rng: Rng, steps: int | None = None,
            callback: Callable[[int, StepLoss], None] | None = None) -> list[StepLoss]:
        cfg = self.spec.train
        steps = cfg.steps if steps is None else steps
        cond, target, _ = self._split(windows01)
        state = AdamState(lr=cfg.lr)
        draw = rng.split("batches")
        noise = rng.split("noise")
        ema = EmaShadow(self.store, cfg.ema_decay) if cfg.ema_decay > 0 else None
        history = []
        for step in range(steps):
            idx = draw.integers(0, len(target), min(cfg.batch_size, len(target)))
            c = self.encoder(cond[idx])
            parts = train_step(target[idx], c, self.denoiser, cfg, self.schedule, noise, self.store, state, step)
            history.append(parts)
            if ema is not None:
                ema.update(self.store)
            if callback is not None:
                callback(step, parts)
        if ema is not None and steps > 0:
            # inference uses the averaged weights
            ema.copy_to(self.store)
        self.denoiser.trained = True
        return history

    # -- inference ---------------------------------------------------------------
    def conditions(self, cond_model: np.ndarray, chunk: int = 256) -> ConditionVector:
        parts = [self.encoder(cond_model[i:i + chunk]).detach() for i in range(0, len(cond_model), chunk)]
        return ConditionVector(Tensor(np.concatenate([p.tokens.data for p in parts])),
                               np.concatenate([p.weights for p in parts]),
                               np.concatenate([p.indices for p in parts]))

    def _check(self) -> None:
        if not self.trained:
            raise StateError("model has not been trained or restored")

    def generate(self, cond_windows01: np.ndarray | None, n: int, rng: Rng) -> np.ndarray:
        """``n`` windows in [0, 1] space; conditioned on the given windows (cycled) or unconditional."""
        self._check()
        if n < 1:
            raise ConfigurationError(f"number of samples must be >= 1, got {n}")
        mode = self.spec.train.posterior_mean
        if cond_windows01 is None:
            x = sample_unconditional(self.denoiser, self.schedule, (n, self.spec.h, self.spec.d), rng, mode)
        else:
            cond, _, _ = self._split(cond_windows01)
            cond = cond[np.arange(n) % len(cond)]
            x = sample_conditional(self.denoiser, self.conditions(cond), self.schedule, rng, mode)
        return (x + 1.0) / 2.0

    def forecast(self, lookbacks01: np.ndarray, rng: Rng, n_samples: int = 10,
                 refine: Callable[[ConditionVector], ConditionVector] | None = None) -> np.ndarray:
        """Pointwise median over ``n_samples`` draws, ``[n, h, d]`` in [0, 1] space."""
        self._check()
        if self.spec.task != "forecast":
            raise ConfigurationError("model was trained for generation, not forecasting")
        if n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")
        cond, off = self._lookback(lookbacks01)
        c = self.conditions(cond)
        if refine is not None:
            c = refine(c)
        n = len(cond)
        rep = ConditionVector(Tensor(np.repeat(c.tokens.data, n_samples, axis=0)),
                              np.repeat(c.weights, n_samples, axis=0), np.repeat(c.indices, n_samples, axis=0))
        x = sample_conditional(self.denoiser, rep, self.schedule, rng, self.spec.train.posterior_mean)
        x = x.reshape(n, n_samples, self.spec.h, self.spec.d)
        point = x[:, 0] if n_samples == 1 else np.median(x, axis=1)
        return (point + off + 1.0) / 2.0

    def lookback_tokens(self, lookbacks01: np.ndarray) -> np.ndarray:
        cond, _ = self._lookback(lookbacks01)
        return self.conditions(cond).tokens.data

    # -- persistence -------------------------------------------------------------
    def save(self, directory) -> Path:
        self._check()
        extra = {"kind": "chime-model", "spec": self.spec.to_dict()}
        if self.normalizer is not None:
            extra["normalizer"] = self.normalizer.to_dict()
        return save_params(self.store, directory, extra=extra)

    @classmethod
    def load(cls, directory) -> ChimeModel:
        arrays, manifest = load_params(directory)
        extra = manifest.get("extra", {})
        if extra.get("kind") != "chime-model":
            raise CheckpointError(f"{directory} is not a model checkpoint")
        try:
            spec = ModelSpec.from_dict(extra["spec"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint spec is incompatible: {exc}") from exc
        norm = Normalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else None
        model = cls(spec, rng=Rng(0), normalizer=norm)
        if set(arrays) != set(model.store):
            raise CheckpointError("checkpoint parameters do not match the model layout")
        try:
            model.store.load_arrays(arrays)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        model.denoiser.trained = True
        return model


def forecast(model: ChimeModel, lookback, h: int, bank: HallucinationBank | None = None,
             support=None, granularity="week", n_samples: int = 10, rng: Rng | None = None,
             strength: float | None = None) -> np.ndarray:
    """Forecast ``h`` steps after ``lookback`` (``[L, d]`` or ``[n, L, d]``), in [0, 1] space.

    With a bank, the lookback condition is refined by feature hallucination
    using ``support`` (the subject's available history, model space).
    """
    if h != model.spec.h:
        raise ConfigurationError(f"model forecasts h = {model.spec.h} steps, asked for {h}")
    single = np.ndim(lookback) == 2
    refine = None
    if bank is not None:
        refine = lambda c: hallucinate(c, support, granularity, bank, strength)
    out = model.forecast(np.asarray(lookback), rng or Rng(0), n_samples, refine)
    return out[0] if single else out


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path
