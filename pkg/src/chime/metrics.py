"""Evaluation: Context-FID, correlation score, GRU scores, MSE/MAE, PCA, reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from chime.numerics import AdamState, ParamStore, Rng, Tensor, adam_step
from chime.numerics import tensor as T
from chime.numerics.nn import ConfigurationError, init_gru, init_mlp, mlp_forward, mlp_from_store
from chime.numerics.nn import gru_forward


class MetricError(ValueError):
    """Metric undefined for the given inputs (too few samples, wrong shapes)."""


def _windows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise MetricError(f"expected windows [n, L, d], got shape {arr.shape}")
    return arr


# -- correlation score -----------------------------------------------------
def correlation_matrix(x) -> np.ndarray:
    """Channel correlations pooled over windows and timesteps; constant channels give 0."""
    flat = _windows(x).reshape(-1, np.shape(x)[-1])
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / len(flat)
    sd = np.sqrt(np.diag(cov))
    ok = sd > 0
    denom = np.outer(np.where(ok, sd, 1.0), np.where(ok, sd, 1.0))
    corr = cov / denom
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    return corr


def correlation_score(ori, gen, prefactor: float = 10.0) -> float:
    """``(1 / prefactor) * sum_{i,j} |corr_ori(i, j) - corr_gen(i, j)|``."""
    ori, gen = _windows(ori), _windows(gen)
    if ori.shape[-1] < 2:
        raise MetricError("correlation score is undefined for a single channel")
    if ori.shape[-1] != gen.shape[-1]:
        raise MetricError(f"channel mismatch: {ori.shape[-1]} vs {gen.shape[-1]}")
    return float(np.abs(correlation_matrix(ori) - correlation_matrix(gen)).sum() / prefactor)


# -- Frechet distance --------------------------------------------------------
@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, E: np.ndarray, ridge: float = 1e-6) -> GaussianStats:
        E = np.asarray(E, dtype=np.float64)
        mu = E.mean(axis=0)
        c = E - mu
        cov = c.T @ c / max(len(E) - 1, 1)
        cov = 0.5 * (cov + cov.T) + ridge * np.eye(E.shape[1])
        return cls(mu, cov)


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    s1 = psd_sqrt(a.cov)
    cross = psd_sqrt(s1 @ b.cov @ s1)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


class Embedder:
    """Window autoencoder whose bottleneck embeds windows for Context-FID."""

    def __init__(self, L: int, d: int, d_e: int = 16, hidden: int = 64, rng: Rng | None = None):
        self.L, self.d, self.d_e = L, d, d_e
        self.store = ParamStore()
        self.fitted = False
        init_mlp(self.store, "emb.enc", [L * d, hidden, d_e], rng or Rng(0))
        init_mlp(self.store, "emb.dec", [d_e, hidden, L * d], rng or Rng(0))

    def _flat(self, x) -> np.ndarray:
        x = _windows(x)
        if x.shape[1:] != (self.L, self.d):
            raise MetricError(f"embedder expects [{self.L}, {self.d}] windows, got {x.shape[1:]}")
        return x.reshape(len(x), -1)

    def fit(self, real, steps: int = 600, lr: float = 3e-3, batch_size: int = 64, rng: Rng | None = None) -> Embedder:
        flat = self._flat(real)
        rng = rng or Rng(0)
        state = AdamState(lr=lr)
        enc, dec = mlp_from_store(self.store, "emb.enc"), mlp_from_store(self.store, "emb.dec")
        for _ in range(steps):
            idx = rng.integers(0, len(flat), min(batch_size, len(flat)))
            T.mse(mlp_forward(dec, mlp_forward(enc, flat[idx])), flat[idx]).backward()
            adam_step(self.store, state)
        self.fitted = True
        return self

    def embed(self, x) -> np.ndarray:
        return mlp_forward(mlp_from_store(self.store, "emb.enc"), self._flat(x)).data


def context_fid(ori, gen, embedder: Embedder) -> float:
    need = embedder.d_e + 1
    n_o, n_g = len(_windows(ori)), len(_windows(gen))
    if min(n_o, n_g) < need:
        raise MetricError(f"Context-FID needs at least {need} windows per set, got {n_o} and {n_g}")
    return frechet_distance(GaussianStats.from_samples(embedder.embed(ori)),
                            GaussianStats.from_samples(embedder.embed(gen)))


# -- GRU evaluators ----------------------------------------------------------
def _bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    # log(1 + e^z) - y z, written to stay finite for large |z|
    soft = T.relu(z) + T.log(1.0 + T.exp(-T.absolute(z)))
    return T.tmean(soft - z * y)


def discriminative_score(ori, gen, seed: int = 0, hidden: int = 24, epochs: int = 10, lr: float = 1e-2,
                         batch_size: int = 32) -> float:
    """``|accuracy - 0.5|`` of a GRU real-vs-generated classifier on a 20% hold-out."""
    ori, gen = _windows(ori), _windows(gen)
    rng = Rng(seed)
    n = min(len(ori), len(gen))
    if n < 20:
        raise MetricError(f"discriminative score needs at least 20 windows per class, got {n}")
    ori = ori[np.sort(rng.choice(len(ori), n, replace=False))] if len(ori) > n else ori
    gen = gen[np.sort(rng.choice(len(gen), n, replace=False))] if len(gen) > n else gen
    X = np.concatenate([ori, gen])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    perm = rng.permutation(2 * n)
    X, y = X[perm], y[perm]
    n_train = int(round(0.8 * len(X)))
    store = ParamStore()
    init = rng.split("init")
    gru = init_gru(store, "disc.gru", X.shape[-1], hidden, init)
    init_mlp(store, "disc.head", [hidden, 1], init)
    head = mlp_from_store(store, "disc.head")

    def logits(batch):
        h = gru_forward(gru, batch)[:, -1, :]
        return mlp_forward(head, h).reshape(len(batch))

    state = AdamState(lr=lr)
    order = rng.split("order")
    for _ in range(epochs):
        p = order.permutation(n_train)
        for s in range(0, n_train, batch_size):
            idx = p[s:s + batch_size]
            _bce_with_logits(logits(X[idx]), y[idx]).backward()
            adam_step(store, state)
    pred = logits(X[n_train:]).data > 0.0
    acc = float(np.mean(pred == (y[n_train:] > 0.5)))
    return abs(acc - 0.5)


def predictive_score(ori, gen, seed: int = 0, hidden: int = 24, epochs: int = 10, lr: float = 5e-3,
                     batch_size: int = 64) -> float:
    """Train a GRU next-step predictor on ``gen``; return its MAE on ``ori``."""
    ori, gen = _windows(ori), _windows(gen)
    if ori.shape[1] < 2 or gen.shape[1] < 2:
        raise ConfigurationError("predictive score needs windows of length >= 2")
    rng = Rng(seed)
    store = ParamStore()
    init = rng.split("init")
    d = gen.shape[-1]
    gru = init_gru(store, "pred.gru", d, hidden, init)
    init_mlp(store, "pred.head", [hidden, d], init)
    head = mlp_from_store(store, "pred.head")

    def predict(batch):
        return mlp_forward(head, gru_forward(gru, batch[:, :-1, :]))

    state = AdamState(lr=lr)
    order = rng.split("order")
    for _ in range(epochs):
        p = order.permutation(len(gen))
        for s in range(0, len(gen), batch_size):
            b = gen[p[s:s + batch_size]]
            T.tmean(T.absolute(predict(b) - b[:, 1:, :])).backward()
            adam_step(store, state)
    return float(np.mean(np.abs(predict(ori).data - ori[:, 1:, :])))


def mse_mae(pred, truth) -> tuple[float, float]:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    err = pred - truth
    return float(np.mean(err ** 2)), float(np.mean(np.abs(err)))


# -- visual summaries ----------------------------------------------------------
@dataclass
class PCAResult:
    real: np.ndarray
    gen: np.ndarray
    components: np.ndarray  # [dims, features]
    mean: np.ndarray
    explained: np.ndarray
    warning: str | None = None


def pca_project(real, gen, dims: int = 2) -> PCAResult:
    """Project flattened windows onto the top principal axes of the pooled set."""
    R, G = _windows(real), _windows(gen)
    pooled = np.concatenate([R.reshape(len(R), -1), G.reshape(len(G), -1)])
    if len(pooled) < dims + 1:
        raise MetricError(f"PCA to {dims} dims needs at least {dims + 1} windows, got {len(pooled)}")
    mu = pooled.mean(axis=0)
    c = pooled - mu
    w, V = np.linalg.eigh(c.T @ c / (len(pooled) - 1))
    order = np.argsort(w)[::-1][:dims]
    w, comps = w[order], V[:, order].T
    # fix the sign so the largest-magnitude loading is positive
    flip = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    warning = None
    scale = max(float(w[0]) if len(w) else 0.0, 1e-300)
    dead = w <= 1e-12 * scale
    if dead.any():
        warning = f"reduced rank: {int(dead.sum())} of {dims} components carry no variance"
        comps[dead] = 0.0
    proj = lambda X: (X.reshape(len(X), -1) - mu) @ comps.T
    return PCAResult(proj(R), proj(G), comps, mu, np.clip(w, 0.0, None), warning)


def marginal_density(real, gen, bins: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Histogram densities of all values on a shared grid: ``(centers, real, gen)``."""
    r, g = np.ravel(real), np.ravel(gen)
    lo, hi = float(min(r.min(), g.min())), float(max(r.max(), g.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hr, _ = np.histogram(r, edges, density=True)
    hg, _ = np.histogram(g, edges, density=True)
    return 0.5 * (edges[:-1] + edges[1:]), hr, hg


def _svg_frame(series: dict[str, tuple[np.ndarray, np.ndarray]], width: int, height: int, pad: int = 30):
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    sx = (width - 2 * pad) / ((x1 - x0) or 1.0)
    sy = (height - 2 * pad) / ((y1 - y0) or 1.0)
    return lambda x: pad + (x - x0) * sx, lambda y: height - pad - (y - y0) * sy


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def svg_plot(series: dict[str, tuple[np.ndarray, np.ndarray]], kind: str = "scatter", title: str = "",
             width: int = 480, height: int = 360) -> str:
    """A dependency-free SVG scatter or line chart."""
    fx, fy = _svg_frame(series, width, height)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width // 2}" y="18" text-anchor="middle" font-size="13">{title}</text>']
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [(fx(a), fy(b)) for a, b in zip(np.asarray(x, float), np.asarray(y, float))]
        if kind == "line":
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        else:
            out.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2" fill="{color}" fill-opacity="0.5"/>' for a, b in pts)
        out.append(f'<text x="{width - 110}" y="{36 + 16 * i}" font-size="12" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- reports ---------------------------------------------------------------
@dataclass
class MetricReport:
    """Metric name -> (mean, std, n_repeats) plus run metadata."""

    values: dict[str, tuple[float, float, int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, name: str, samples: Sequence[float]) -> None:
        arr = np.asarray(samples, dtype=np.float64)
        self.values[name] = (float(arr.mean()), float(arr.std()), int(arr.size))

    def to_dict(self) -> dict:
        return {"meta": self.meta,
                "metrics": {k: {"mean": m, "std": s, "n_repeats": n} for k, (m, s, n) in self.values.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "n_repeats", "display"])
        for k in sorted(self.values):
            m, s, n = self.values[k]
            w.writerow([k, repr(m), repr(s), n, f"{m:.3f}±{s:.3f}"])
        return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return path
