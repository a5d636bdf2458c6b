from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from chime.numerics.tensor import ContractError, Tensor

DEFAULT_LR = 1e-4


class ParamStore(OrderedDict):
    """Insertion-ordered mapping of parameter name to trainable Tensor."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self[name] = t
        return t

    def subset(self, prefix: str) -> ParamStore:
        out = ParamStore()
        for name, t in self.items():
            if name.startswith(prefix):
                out[name] = t
        return out

    def merge(self, other: ParamStore) -> ParamStore:
        for name, t in other.items():
            if name in self and self[name] is not t:
                raise KeyError(f"duplicate parameter name {name!r}")
            self[name] = t
        return self

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arrays[name].shape} vs {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> ParamStore:
    """One bias-corrected Adam update; clears grads afterwards."""
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in store.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
    return store


def grad_norms(store: ParamStore) -> dict[str, float]:
    return {name: float(np.linalg.norm(t.grad)) if t.grad is not None else float("nan")
            for name, t in store.items()}


class EmaShadow:
    """Exponential moving average of a store's parameters."""

    def __init__(self, store: ParamStore, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.values = {name: p.data.copy() for name, p in store.items()}

    def update(self, store: ParamStore) -> None:
        for name, p in store.items():
            shadow = self.values[name]
            shadow *= self.decay
            shadow += (1.0 - self.decay) * p.data

    def copy_to(self, store: ParamStore) -> None:
        for name, p in store.items():
            p.data = self.values[name].copy()
