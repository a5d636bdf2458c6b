"""Feature hallucination bank: segment encoders, analogy mining, transformers H_z.

Each granularity ``z`` owns a segment autoencoder (frozen after fitting), a
hallucinator ``H_z`` trained on analogy quadruples mined across series, and a
linear projection pair ``D_z`` (condition width -> feature width) / ``U_z``
(back) that lets ``H_z`` act on condition tokens.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from chime.multiscale import ConditionVector
from chime.numerics import AdamState, ParamStore, Rng, Tensor, adam_step
from chime.numerics import tensor as T
from chime.numerics.checkpoint import CheckpointError, load_params, save_params
from chime.numerics.nn import ConfigurationError, glorot, init_mlp, mlp_forward, mlp_from_store

# hourly-sampled step counts for the named granularities
GRANULARITY_STEPS = {
    "1day": 24,
    "2days": 48,
    "3days": 72,
    "week": 168,
    "half-month": 360,
    "month": 720,
    "season": 2160,
}
DEFAULT_BANK = ("1day", "2days", "3days", "week")
DIRECTIONS = ("min", "max")


class StateError(RuntimeError):
    """Encoder or bank used before training."""


@dataclass
class GranularitySet:
    labels: list[str]
    steps: list[int]

    def __post_init__(self):
        if len(self.labels) != len(self.steps) or not self.labels:
            raise ConfigurationError("granularity labels and steps must be non-empty and aligned")
        if any(z < 1 for z in self.steps) or any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ConfigurationError(f"granularities must be positive and strictly increasing, got {self.steps}")

    @classmethod
    def from_labels(cls, labels: Sequence[str], steps_per_label: dict | None = None) -> GranularitySet:
        table = steps_per_label or GRANULARITY_STEPS
        unknown = [g for g in labels if g not in table]
        if unknown:
            raise ConfigurationError(f"unknown granularity {unknown}; valid: {sorted(table)}")
        pairs = sorted(((table[g], g) for g in labels))
        return cls([g for _, g in pairs], [z for z, _ in pairs])


def granularity_steps(g) -> int:
    if isinstance(g, str):
        if g not in GRANULARITY_STEPS:
            raise ConfigurationError(f"unknown granularity {g!r}; valid: {sorted(GRANULARITY_STEPS)}")
        return GRANULARITY_STEPS[g]
    if int(g) < 1:
        raise ConfigurationError(f"granularity must be positive, got {g}")
    return int(g)


# -- segmentation and segment features ---------------------------------------
def segment(X, z: int) -> list[np.ndarray]:
    """Disjoint consecutive ``z``-step segments; the ragged tail is dropped."""
    values = getattr(X, "values", X)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    if z < 1 or z > n:
        raise ConfigurationError(f"segment length z={z} does not fit series of length N={n}")
    return [values[j * z:(j + 1) * z] for j in range(n // z)]


@dataclass
class SegmentFeature:
    vector: np.ndarray
    series_id: int
    index: int
    z: int


class SegmentEncoder:
    """Per-granularity MLP autoencoder; the bottleneck activation is the feature."""

    def __init__(self, z: int, d: int, d_f: int = 16, hidden: int = 64, rng: Rng | None = None,
                 store: ParamStore | None = None, prefix: str = "seg"):
        self.z, self.d, self.d_f, self.hidden = z, d, d_f, hidden
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        self.trained = False
        self.stats: dict = {}
        if rng is not None:
            init_mlp(self.store, f"{prefix}.enc", [z * d, hidden, d_f], rng)
            init_mlp(self.store, f"{prefix}.dec", [d_f, hidden, z * d], rng)

    def _encode(self, flat) -> Tensor:
        return mlp_forward(mlp_from_store(self.store, f"{self.prefix}.enc"), flat)

    def _decode(self, feats) -> Tensor:
        return mlp_forward(mlp_from_store(self.store, f"{self.prefix}.dec"), feats)

    def _flatten(self, segments) -> np.ndarray:
        arr = np.asarray(segments, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != (self.z, self.d):
            raise ConfigurationError(f"encoder expects [{self.z}, {self.d}] segments, got {arr.shape[1:]}")
        return arr.reshape(arr.shape[0], self.z * self.d)

    def encode(self, segments) -> np.ndarray:
        if not self.trained:
            raise StateError(f"segment encoder for z={self.z} has not been trained")
        return self._encode(self._flatten(segments)).data

    def reconstruction_mse(self, segments) -> float:
        flat = self._flatten(segments)
        return float(np.mean((self._decode(self._encode(flat)).data - flat) ** 2))


def train_segment_encoder(segments: Sequence[np.ndarray], d_f: int = 16, hidden: int = 64, steps: int = 400,
                          lr: float = 3e-3, batch_size: int = 64, rng: Rng | None = None,
                          prefix: str = "seg") -> SegmentEncoder:
    if len(segments) == 0:
        raise ConfigurationError("no segments to train the encoder on")
    rng = rng or Rng(0)
    z, d = np.asarray(segments[0]).shape
    enc = SegmentEncoder(z, d, d_f, hidden, rng=rng.split("init"), prefix=prefix)
    flat = enc._flatten(segments)
    state = AdamState(lr=lr)
    draw = rng.split("batches")
    for _ in range(steps):
        idx = draw.integers(0, len(flat), min(batch_size, len(flat)))
        loss = T.mse(enc._decode(enc._encode(flat[idx])), flat[idx])
        loss.backward()
        adam_step(enc.store, state)
    enc.trained = True
    var = float(np.var(flat))
    mse = enc.reconstruction_mse(segments)
    enc.stats = {"reconstruction_mse": mse, "input_variance": var, "n_segments": len(flat),
                 "relative_error": mse / var if var > 0 else 0.0}
    return enc


def encode_segments(segments, encoder: SegmentEncoder, series_id: int = 0) -> list[SegmentFeature]:
    feats = encoder.encode(np.asarray(segments))
    return [SegmentFeature(f, series_id, j, encoder.z) for j, f in enumerate(feats)]


# -- analogy mining ----------------------------------------------------------
@dataclass
class AnalogyQuadruple:
    fX1: np.ndarray
    fX2: np.ndarray
    fY1: np.ndarray
    fY2: np.ndarray
    cosine: float = float("nan")
    pairs: tuple = ()


def cosine(u: np.ndarray, v: np.ndarray) -> float | None:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return None
    return float(np.dot(u, v) / (nu * nv))


def candidate_pairs(n: int, cap: int = 128) -> list[tuple[int, int]]:
    """Ordered pairs of distinct indices, nearest in time first, at most ``cap``."""
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    pairs.sort(key=lambda p: (abs(p[0] - p[1]), p[0], p[1]))
    return pairs[:cap]


def _as_matrix(feats) -> np.ndarray:
    if len(feats) and isinstance(feats[0], SegmentFeature):
        return np.stack([f.vector for f in feats])
    return np.asarray(feats, dtype=np.float64)


def mine_quadruples(featsX, featsY, direction: str = "min", cap: int = 128) -> list[AnalogyQuadruple]:
    """The quadruple whose difference vectors have extreme cosine similarity.

    Returns a one-element list, or an empty list when every candidate has a
    zero difference vector.
    """
    if direction not in DIRECTIONS:
        raise ConfigurationError(f"analogy_direction must be one of {DIRECTIONS}, got {direction!r}")
    FX, FY = _as_matrix(featsX), _as_matrix(featsY)
    if len(FX) < 2 or len(FY) < 2:
        raise ConfigurationError("mining needs at least two features per series")
    px, py = candidate_pairs(len(FX), cap), candidate_pairs(len(FY), cap)
    dx = np.stack([FX[j] - FX[i] for i, j in px])
    dy = np.stack([FY[j] - FY[i] for i, j in py])
    nx, ny = np.linalg.norm(dx, axis=1), np.linalg.norm(dy, axis=1)
    okx, oky = nx > 0, ny > 0
    if not okx.any() or not oky.any():
        return []
    cos = (dx @ dy.T) / (np.where(okx, nx, 1.0)[:, None] * np.where(oky, ny, 1.0)[None, :])
    score = cos if direction == "max" else -cos
    score = np.where(okx[:, None] & oky[None, :], score, -np.inf)
    a, b = np.unravel_index(int(np.argmax(score)), score.shape)  # first index wins ties
    (i, j), (k, l) = px[a], py[b]
    return [AnalogyQuadruple(FX[i], FX[j], FY[k], FY[l], float(cos[a, b]), ((i, j), (k, l)))]


def mine_all(feature_sets: Sequence, direction: str = "min", cap: int = 128) -> list[AnalogyQuadruple]:
    """One quadruple per ordered pair of distinct series."""
    out = []
    for x, fx in enumerate(feature_sets):
        for y, fy in enumerate(feature_sets):
            if x != y and len(fx) >= 2 and len(fy) >= 2:
                out.extend(mine_quadruples(fx, fy, direction, cap))
    return out


# -- hallucinator ------------------------------------------------------------
class Hallucinator:
    """``H(a, b, c) = a + MLP([a, b, c])``, a 3-layer MLP in residual form.

    The residual form makes the identity on the first argument the
    zero-output-layer special case.
    """

    def __init__(self, d_f: int, hidden: int = 64, rng: Rng | None = None, store: ParamStore | None = None,
                 prefix: str = "H"):
        self.d_f, self.hidden, self.prefix = d_f, hidden, prefix
        self.store = store if store is not None else ParamStore()
        if rng is not None:
            init_mlp(self.store, f"{prefix}.mlp", [3 * d_f, hidden, hidden, d_f], rng, final_gain=0.1)

    def __call__(self, a, b, c) -> Tensor:
        a = T.as_tensor(a)
        x = T.concat([a, T.as_tensor(b), T.as_tensor(c)], axis=-1)
        return a + mlp_forward(mlp_from_store(self.store, f"{self.prefix}.mlp"), x)

    def set_identity(self) -> None:
        last = max(k for k in self.store if k.startswith(f"{self.prefix}.mlp."))
        layer = last.rsplit(".", 1)[0]
        self.store[f"{layer}.w"].data[...] = 0.0
        self.store[f"{layer}.b"].data[...] = 0.0


def quadruple_arrays(quads: Sequence[AnalogyQuadruple]):
    return tuple(np.stack([getattr(q, f) for q in quads]) for f in ("fX1", "fX2", "fY1", "fY2"))


def hallucination_loss(H: Hallucinator, quads) -> Tensor:
    """Mean over quadruples of the squared norm ``|H(fX1, fY1, fY2) - fX2|^2``."""
    x1, x2, y1, y2 = quads if isinstance(quads, tuple) else quadruple_arrays(quads)
    diff = H(x1, y1, y2) - x2
    return T.tmean(T.tsum(T.square(diff), axis=-1))


@dataclass
class HallucinatorHistory:
    loss: list[float] = field(default_factory=list)
    best: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_hallucinator(quads: Sequence[AnalogyQuadruple], z: int, epochs: int = 200, lr: float = 3e-3,
                       rng: Rng | None = None, hidden: int = 64, batch_size: int = 64,
                       prefix: str = "H") -> tuple[Hallucinator, HallucinatorHistory]:
    """Fit ``H_z`` by Adam on the squared analogy error; keeps the best epoch's parameters."""
    if not quads:
        raise ConfigurationError(f"no analogy quadruples to train H for z={z}")
    rng = rng or Rng(0)
    arrays = quadruple_arrays(quads)
    H = Hallucinator(arrays[0].shape[1], hidden, rng=rng.split("init"), prefix=prefix)
    state = AdamState(lr=lr)
    order_rng = rng.split("order")
    n = len(arrays[0])
    hist = HallucinatorHistory()
    best = hallucination_loss(H, arrays).item()
    best_params = H.store.arrays()
    hist.loss.append(best)
    hist.best.append(best)
    for epoch in range(1, epochs + 1):
        perm = order_rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            hallucination_loss(H, tuple(a[idx] for a in arrays)).backward()
            adam_step(H.store, state)
        full = hallucination_loss(H, arrays).item()
        hist.loss.append(full)
        if full < best:
            best, best_params, hist.best_epoch = full, H.store.arrays(), epoch
        hist.best.append(best)
    H.store.load_arrays(best_params)
    return H, hist


def linear_analogy_dataset(n: int, d_f: int = 16, seed: int = 0) -> list[AnalogyQuadruple]:
    """Synthetic quadruples obeying ``fX2 = fX1 + (fY2 - fY1)`` exactly."""
    rng = Rng(seed)
    x1, y1, y2 = (rng.normal((n, d_f)) for _ in range(3))
    x2 = x1 + (y2 - y1)
    return [AnalogyQuadruple(x1[i], x2[i], y1[i], y2[i]) for i in range(n)]


# -- bank ----------------------------------------------------------------------
def blend_weights(g: float, zs: Sequence[int]) -> dict[int, float]:
    """Weights over bank granularities for a target of ``g`` steps.

    In-bank targets use the matching ``H`` alone; targets outside the bank
    range use the nearest end. Otherwise the two neighbours ``z_lo < g < z_hi``
    are weighted proportional to ``1 / |log g - log z|``.
    """
    zs = sorted(zs)
    if g in zs:
        return {g: 1.0}
    if g < zs[0]:
        return {zs[0]: 1.0}
    if g > zs[-1]:
        return {zs[-1]: 1.0}
    hi = next(z for z in zs if z > g)
    lo = max(z for z in zs if z < g)
    w_lo = 1.0 / abs(math.log(g) - math.log(lo))
    w_hi = 1.0 / abs(math.log(g) - math.log(hi))
    s = w_lo + w_hi
    return {lo: w_lo / s, hi: w_hi / s}


@dataclass
class BankEntry:
    label: str
    z: int
    encoder: SegmentEncoder
    hallucinator: Hallucinator
    history: HallucinatorHistory
    n_quadruples: int
    D: Tensor | None = None  # [d_m, d_f]
    U: Tensor | None = None  # [d_f, d_m]

    def support_features(self, support: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """Features of the last two full segments of ``support``, or ``None`` if too short."""
        support = np.asarray(support, dtype=np.float64)
        if support.ndim != 2 or support.shape[0] < 2 * self.z:
            return None
        tail = support[support.shape[0] - 2 * self.z:]
        f = self.encoder.encode(np.stack([tail[:self.z], tail[self.z:]]))
        return f[0], f[1]


class HallucinationBank:
    def __init__(self, entries: Sequence[BankEntry], d: int, d_f: int, direction: str = "min"):
        if not entries:
            raise ConfigurationError("a hallucination bank needs at least one granularity")
        self.entries = sorted(entries, key=lambda e: e.z)
        self.d, self.d_f, self.direction = d, d_f, direction
        self.strength = 1.0
        self.projection_history: dict[str, list[float]] = {}

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def by_z(self) -> dict[int, BankEntry]:
        return {e.z: e for e in self.entries}

    @property
    def has_projections(self) -> bool:
        return all(e.D is not None for e in self.entries)

    # projection pair ------------------------------------------------------
    def fit_projections(self, tokens: np.ndarray, targets: dict[str, tuple[np.ndarray, np.ndarray]],
                        d_m: int, steps: int = 300, lr: float = 3e-3, batch_size: int = 64,
                        rng: Rng | None = None) -> None:
        """Fit ``D_z``/``U_z`` on condition tokens ``[n, tokens, d_m]``.

        ``targets[label] = (rows, features)`` pairs a subset of token rows with
        the feature of the segment ending where each condition window ends.
        The loss is token reconstruction through ``U D`` plus alignment of the
        token-averaged ``D c`` with that feature.
        """
        rng = rng or Rng(0)
        tokens = np.asarray(tokens, dtype=np.float64)
        for e in self.entries:
            init = rng.split(f"proj.{e.label}")
            store = ParamStore()
            D = store.add("D", glorot(init, d_m, self.d_f))
            U = store.add("U", glorot(init, self.d_f, d_m))
            rows, feats = targets.get(e.label, (np.zeros(0, dtype=int), np.zeros((0, self.d_f))))
            rows = np.asarray(rows, dtype=int)
            state = AdamState(lr=lr)
            draw = init.split("batches")
            hist = []
            for _ in range(steps):
                idx = draw.integers(0, len(tokens), min(batch_size, len(tokens)))
                c = Tensor(tokens[idx])
                loss = T.mse(T.matmul(T.matmul(c, D), U), tokens[idx])
                if len(rows):
                    j = draw.integers(0, len(rows), min(batch_size, len(rows)))
                    proj = T.tmean(T.matmul(Tensor(tokens[rows[j]]), D), axis=1)
                    loss = loss + T.mse(proj, feats[j])
                loss.backward()
                adam_step(store, state)
                hist.append(loss.item())
            e.D, e.U = Tensor(D.data.copy()), Tensor(U.data.copy())
            self.projection_history[e.label] = hist

    def delta(self, entry: BankEntry, tokens: np.ndarray, fY1: np.ndarray, fY2: np.ndarray) -> np.ndarray:
        """``U (H(D c, fY1, fY2) - D c)`` for tokens ``[..., d_m]``."""
        Dc = tokens @ entry.D.data
        lead = Dc.shape[:-1]
        flat = Dc.reshape(-1, self.d_f)
        b = np.broadcast_to(fY1, flat.shape)
        c = np.broadcast_to(fY2, flat.shape)
        moved = entry.hallucinator(flat, b, c).data - flat
        return moved.reshape(lead + (self.d_f,)) @ entry.U.data

    # persistence -----------------------------------------------------------
    def save(self, directory) -> Path:
        root = Path(directory)
        for e in self.entries:
            store = ParamStore()
            for k, v in e.encoder.store.items():
                store[f"encoder/{k}"] = v
            for k, v in e.hallucinator.store.items():
                store[f"H/{k}"] = v
            if e.D is not None:
                store["proj/D"] = e.D
                store["proj/U"] = e.U
            save_params(store, root / e.label, extra={
                "label": e.label, "z": e.z, "d": self.d, "d_f": self.d_f,
                "encoder_hidden": e.encoder.hidden, "hallucinator_hidden": e.hallucinator.hidden,
                "encoder_stats": e.encoder.stats, "n_quadruples": e.n_quadruples,
                "loss": e.history.loss, "best_epoch": e.history.best_epoch,
            })
        meta = {"labels": self.labels, "d": self.d, "d_f": self.d_f, "direction": self.direction,
                "strength": self.strength}
        (root / "bank.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return root

    @classmethod
    def load(cls, directory) -> HallucinationBank:
        root = Path(directory)
        try:
            meta = json.loads((root / "bank.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read hallucination bank at {root}: {exc}") from exc
        entries = []
        for label in meta["labels"]:
            arrays, manifest = load_params(root / label)
            x = manifest.get("extra", {})
            enc = SegmentEncoder(x["z"], x["d"], x["d_f"], x["encoder_hidden"])
            H = Hallucinator(x["d_f"], x["hallucinator_hidden"])
            for name, arr in arrays.items():
                kind, _, key = name.partition("/")
                if kind == "encoder":
                    enc.store.add(key, arr)
                elif kind == "H":
                    H.store.add(key, arr)
            enc.trained = True
            enc.stats = x.get("encoder_stats", {})
            hist = HallucinatorHistory(loss=list(x.get("loss", [])), best_epoch=x.get("best_epoch", 0))
            entry = BankEntry(label, x["z"], enc, H, hist, x.get("n_quadruples", 0))
            if "proj/D" in arrays:
                entry.D, entry.U = Tensor(arrays["proj/D"]), Tensor(arrays["proj/U"])
            entries.append(entry)
        bank = cls(entries, meta["d"], meta["d_f"], meta.get("direction", "min"))
        bank.strength = meta.get("strength", 1.0)
        return bank


def pseudo_series(values: np.ndarray, z: int, chunk_segments: int) -> list[np.ndarray]:
    """Split a long series into disjoint chunks of ``chunk_segments`` segments each."""
    span = z * chunk_segments
    n = values.shape[0] // span
    return [values[i * span:(i + 1) * span] for i in range(n)]


def train_bank(series: Sequence[np.ndarray], granularities: GranularitySet, d_f: int = 16,
               direction: str = "min", cap: int = 128, chunk_segments: int = 4, encoder_steps: int = 400,
               epochs: int = 100, max_quadruples: int = 1024, rng: Rng | None = None) -> HallucinationBank:
    """Train encoders, then mine quadruples and fit ``H_z``, for every granularity.

    Each source series is cut into disjoint chunks of ``chunk_segments``
    segments that act as separate series during mining.
    """
    rng = rng or Rng(0)
    series = [np.asarray(s, dtype=np.float64) for s in series]
    d = series[0].shape[1]
    entries = []
    for label, z in zip(granularities.labels, granularities.steps):
        chunks = [c for s in series for c in pseudo_series(s, z, chunk_segments)]
        if len(chunks) < 2:
            raise ConfigurationError(
                f"granularity {label} (z={z}) needs at least two chunks of {chunk_segments * z} steps; "
                f"the training series are too short")
        segs = [seg for c in chunks for seg in segment(c, z)]
        sub = rng.split(f"bank.{label}")
        enc = train_segment_encoder(segs, d_f=d_f, steps=encoder_steps, rng=sub.split("encoder"),
                                    prefix="seg")
        feats = [enc.encode(np.stack(segment(c, z))) for c in chunks]
        quads = mine_all(feats, direction, cap)
        if len(quads) > max_quadruples:
            keep = np.sort(sub.split("subsample").choice(len(quads), max_quadruples, replace=False))
            quads = [quads[i] for i in keep]
        H, hist = train_hallucinator(quads, z, epochs=epochs, rng=sub.split("H"))
        entries.append(BankEntry(label, z, enc, H, hist, len(quads)))
    return HallucinationBank(entries, d, d_f, direction)


def hallucinate(c: ConditionVector, support, target_granularity, bank: HallucinationBank | None,
                strength: float | None = None) -> ConditionVector:
    """Refine condition tokens: ``c + strength * sum_z w_z U_z (H_z(D_z c, fY1, fY2) - D_z c)``.

    ``support`` is the subject's available history ``[n, d]``; its last two
    ``z``-segments give the support pair. Without usable support the input is
    returned unchanged with a warning.
    """
    if bank is None or not bank.has_projections:
        raise StateError("hallucination bank is not trained (projection pair missing)")
    lam = bank.strength if strength is None else strength
    g = granularity_steps(target_granularity)
    weights = blend_weights(g, [e.z for e in bank.entries])
    tokens = c.tokens.data
    if support is None or np.asarray(support).size == 0:
        return ConditionVector(Tensor(tokens.copy()), c.weights, c.indices, False, "empty support; condition unchanged")
    table = bank.by_z()
    total = np.zeros_like(tokens)
    used = 0.0
    for z, w in weights.items():
        pair = table[z].support_features(support)
        if pair is None:
            continue
        total += w * bank.delta(table[z], tokens, *pair)
        used += w
    if used == 0.0:
        return ConditionVector(Tensor(tokens.copy()), c.weights, c.indices, False,
                               "support shorter than two segments at every blended granularity; condition unchanged")
    out = tokens + lam * total / used
    return ConditionVector(Tensor(out), c.weights, c.indices, True, None)
