"""Dataset construction: synthetic generators, CSV ingestion, windows, splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from chime.numerics import Rng


class DataError(ValueError):
    """Invalid dataset request (bad sizes, empty results, bad fractions)."""


class CSVParseError(DataError):
    def __init__(self, path, row: int, column: int, cell: str):
        super().__init__(f"{path}: row {row}, column {column}: cannot parse {cell!r} as a number")
        self.row = row
        self.column = column


@dataclass
class RawSeries:
    values: np.ndarray  # N x d
    channel_names: list[str]
    sampling_step: str | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"series must be at least 1x1, got {self.values.shape}")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError(
                f"{len(self.channel_names)} channel names for {self.values.shape[1]} channels")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class SeriesWindow:
    values: np.ndarray  # L x d
    origin_index: int
    series_id: int = 0

    @property
    def length(self) -> int:
        return self.values.shape[0]


def stack_windows(windows: Sequence[SeriesWindow]) -> np.ndarray:
    return np.stack([w.values for w in windows])


# -- generators -----------------------------------------------------------
def generate_sines(n: int, L: int = 24, d: int = 5, seed: int = 0) -> list[SeriesWindow]:
    """Independent windows of ``sin(2*pi*f*t/L + phase)`` per channel."""
    if min(n, L, d) < 1:
        raise DataError(f"n, L, d must be >= 1, got {n}, {L}, {d}")
    rng = Rng(seed)
    freq = rng.uniform((n, d), 0.0, 1.0)
    phase = rng.uniform((n, d), 0.0, 2.0 * math.pi)
    t = np.arange(L) / L
    vals = np.sin(2.0 * math.pi * freq[:, None, :] * t[None, :, None] + phase[:, None, :])
    # windows are independent; origins are laid end to end so splits never overlap
    return [SeriesWindow(vals[i], origin_index=i * L) for i in range(n)]


@dataclass
class RegimeShiftSpec:
    period: int = 24
    shift_at: float = 0.5
    slope_before: float = 0.0
    slope_after: float = 0.002
    amp_before: float = 1.0
    amp_after: float = 1.6
    noise: float = 0.05


def regime_shift_components(n: int, d: int, spec: RegimeShiftSpec, seed: int):
    """Return ``(trend, seasonal, noise, level)`` arrays making up the series."""
    if not 0.0 < spec.shift_at < 1.0:
        raise DataError(f"shift_at must lie in (0, 1), got {spec.shift_at}")
    rng = Rng(seed)
    level = rng.uniform(d, -0.5, 0.5)
    phase = rng.uniform(d, 0.0, 2.0 * math.pi)
    gain = rng.uniform(d, 0.6, 1.4)
    s = int(math.floor(spec.shift_at * n))
    t = np.arange(n, dtype=np.float64)
    trend = np.where(t < s, spec.slope_before * t, spec.slope_before * s + spec.slope_after * (t - s))
    amp = np.where(t < s, spec.amp_before, spec.amp_after)
    seasonal = amp[:, None] * gain[None, :] * np.sin(2.0 * math.pi * t[:, None] / spec.period + phase[None, :])
    noise = spec.noise * rng.normal((n, d))
    return trend, seasonal, noise, level


def generate_regime_shift(n: int, L: int = 24, d: int = 2, shift_at: float = 0.5, seed: int = 0,
                          **overrides) -> RawSeries:
    """Piecewise trend + seasonal series whose slope and amplitude change at ``floor(shift_at*n)``.

    ``n`` is the series length and ``L`` the seasonal period.
    """
    spec = RegimeShiftSpec(period=L, shift_at=shift_at, **overrides)
    trend, seasonal, noise, level = regime_shift_components(n, d, spec, seed)
    values = level[None, :] + trend[:, None] + seasonal + noise
    return RawSeries(values, [f"ch{j}" for j in range(d)], sampling_step="1h")


# -- ingestion --------------------------------------------------------------
def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_csv(path) -> RawSeries:
    """Read a header-first numeric CSV; a non-numeric first column is dropped as timestamps."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    first = rows[1]
    has_timestamp = bool(first) and first[0].strip() != "" and not _is_number(first[0].strip())
    start = 1 if has_timestamp else 0
    names = header[start:]
    values = []
    dropped = 0
    for i, row in enumerate(rows[1:], start=2):
        cells = [c.strip() for c in row[start:]]
        if len(cells) != len(names):
            raise DataError(f"{path}: row {i} has {len(cells)} values, header has {len(names)}")
        parsed = []
        for j, cell in enumerate(cells, start=start + 1):
            if cell == "":
                parsed.append(float("nan"))
                continue
            try:
                parsed.append(float(cell))
            except ValueError:
                raise CSVParseError(path, i, j, cell) from None
        if any(math.isnan(v) or math.isinf(v) for v in parsed):
            dropped += 1
            continue
        values.append(parsed)
    if not values:
        raise DataError(f"{path}: every row contained NaN")
    return RawSeries(np.array(values), names, dropped_rows=dropped)


def dataset_path(root, name: str) -> Path:
    return Path(root) / "data" / name / "raw.csv"


# -- windows, normalisation, splits ----------------------------------------
def window(series: RawSeries, L: int, stride: int = 1, series_id: int = 0) -> list[SeriesWindow]:
    n = series.length
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if L < 1 or L > n:
        raise DataError(f"window length L={L} does not fit series of length N={n}")
    return [SeriesWindow(series.values[s:s + L].copy(), origin_index=s, series_id=series_id)
            for s in range(0, n - L + 1, stride)]


@dataclass
class Normalizer:
    minimum: np.ndarray
    maximum: np.ndarray
    mode: str = "minmax01"

    @property
    def scale(self) -> np.ndarray:
        return self.maximum - self.minimum

    def apply(self, x: np.ndarray) -> np.ndarray:
        scale = self.scale
        safe = np.where(scale > 0, scale, 1.0)
        out = (np.asarray(x) - self.minimum) / safe
        return np.where(scale > 0, out, 0.0)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.minimum

    def to_dict(self) -> dict:
        return {"mode": self.mode, "min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64), d["mode"])


def fit_normalizer(train: Sequence[SeriesWindow]) -> Normalizer:
    if not train:
        raise DataError("cannot fit a normalizer on an empty training split")
    arr = stack_windows(train).reshape(-1, train[0].values.shape[1])
    return Normalizer(arr.min(axis=0), arr.max(axis=0))


def normalize_windows(windows: Sequence[SeriesWindow], norm: Normalizer) -> list[SeriesWindow]:
    return [SeriesWindow(norm.apply(w.values), w.origin_index, w.series_id) for w in windows]


def fit_apply_normalizer(train: Sequence[SeriesWindow], *others: Sequence[SeriesWindow]):
    """Fit min-max on ``train`` only and transform every split with it.

    Returns ``(normalized_train, [normalized_other, ...], normalizer)``.
    """
    norm = fit_normalizer(train)
    return normalize_windows(train, norm), [normalize_windows(o, norm) for o in others], norm


def _count(frac: float, n: int) -> int:
    # tolerate float noise such as 0.8 * 100 = 80.00000000000001
    return int(math.ceil(frac * n - 1e-9))


def split_and_subsample(windows: Sequence[SeriesWindow], train_frac: float = 0.8,
                        few_shot_frac: float = 1.0, seed: int = 0):
    """Chronological train/test split, then keep a contiguous prefix of train.

    Test windows overlapping any training-portion window are purged. ``seed``
    is accepted for interface symmetry; the protocol is deterministic.
    """
    del seed
    for name, frac in (("train_frac", train_frac), ("few_shot_frac", few_shot_frac)):
        if not 0.0 < frac <= 1.0:
            raise DataError(f"{name} must lie in (0, 1], got {frac}")
    ordered = sorted(windows, key=lambda w: (w.series_id, w.origin_index))
    n = len(ordered)
    n_train = _count(train_frac, n)
    n_keep = _count(few_shot_frac * train_frac, n)
    if n_keep < 1:
        raise DataError(f"few-shot subsample of {n} windows is empty")
    portion = ordered[:n_train]
    train = portion[:n_keep]
    horizon = {}
    for w in portion:
        horizon[w.series_id] = max(horizon.get(w.series_id, -1), w.origin_index + w.length)
    test = [w for w in ordered[n_train:] if w.origin_index >= horizon.get(w.series_id, -1)]
    return list(train), test
