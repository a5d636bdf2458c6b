"""Experiment orchestration: config resolution, data preparation, training, evaluation."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import subprocess
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from chime import __version__
from chime.data import (
    DataError,
    Normalizer,
    SeriesWindow,
    fit_normalizer,
    generate_regime_shift,
    generate_sines,
    load_csv,
    split_and_subsample,
    stack_windows,
    window,
)
from chime.diffusion import StepLoss, TrainConfig
from chime.hallucination import GranularitySet, HallucinationBank, hallucinate, train_bank
from chime.metrics import (
    Embedder,
    MetricReport,
    context_fid,
    correlation_score,
    discriminative_score,
    marginal_density,
    mse_mae,
    pca_project,
    predictive_score,
    svg_plot,
    write_text,
)
from chime.model import ChimeModel, ModelSpec
from chime.multiscale import ScaleConfig, default_rates
from chime.numerics import Rng
from chime.numerics.nn import ConfigurationError

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "task": "generation",
    "dataset": {
        "source": "sines", "n_windows": 2000, "length": 2400, "n_sources": 3, "period": 24, "shift_at": 0.5,
        "L": 24, "d": 5, "h": 0, "stride": 1, "train_frac": 0.8, "few_shot_frac": 1.0, "max_eval_windows": 400,
    },
    "multiscale": {
        "rates": None, "trend_window": 5, "patch_size": 4, "k": 3, "d_model": 64, "tokens": 8, "heads": 4,
        "hidden": 64, "mode": "full",
    },
    "hallucination": {
        "enabled": False, "granularities": ["1day", "2days", "3days", "week"], "target_granularity": "week",
        "analogy_direction": "min", "d_f": 16, "chunk_segments": 4, "pair_cap": 128, "encoder_steps": 400,
        "epochs": 100, "projection_steps": 300, "strengths": [0.0, 0.5, 1.0],
    },
    "diffusion": {
        "T": None, "beta1": 1e-4, "betaT": 5e-2, "eta": 1.0, "lr": 1e-4, "batch_size": 128, "steps": 2000,
        "paradigm": "eps-attn", "posterior_mean": "standard", "proj_weight": 1.0, "ema_decay": 0.995,
        "hidden": 128, "tokens": 8,
        "time_dim": 32, "center": True,
    },
    "metrics": {
        "n_repeats": 3, "enabled": ["context_fid", "correlation", "discriminative", "predictive"],
        "n_generate": None, "forecast_samples": 10, "embedder_steps": 600, "correlation_prefactor": 10.0,
        "reference_noise": True,
    },
}

# datasets whose default diffusion length is 500 steps; every other source uses 1000
SHORT_SCHEDULE_SOURCES = ("sines",)

GENERATION_METRICS = ("context_fid", "correlation", "discriminative", "predictive")
FORECAST_METRICS = ("mse", "mae")

ABLATIONS = {
    "full": {},
    "no-multiscale": {"multiscale": {"mode": "no-multiscale"}},
    "average-weight": {"multiscale": {"mode": "average-weight"}},
    "no-fh": {"hallucination": {"enabled": False}},
    "eps-attn": {"diffusion": {"paradigm": "eps-attn"}},
    "data-recon": {"diffusion": {"paradigm": "data-reconstruction"}},
    "attn-original": {"diffusion": {"paradigm": "attn-original-condition"}},
}
GRANULARITY_ABLATIONS = ("1day", "2days", "3days", "week", "half-month", "month", "season")


class ConfigError(ConfigurationError):
    """Configuration failed schema validation or references missing inputs."""


# -- configuration -----------------------------------------------------------
def _schema() -> dict:
    text = resources.files("chime").joinpath("schema/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {e.message}")


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted paths whose values differ between two configs."""
    out = []
    for k in sorted(set(a) | set(b)):
        path = f"{prefix}{k}"
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += config_diff(va, vb, path + ".")
        elif va != vb:
            out.append(path)
    return out


def load_preset(name: str) -> dict:
    try:
        text = resources.files("chime").joinpath(f"presets/{name}.json").read_text(encoding="utf-8")
    except (FileNotFoundError, OSError):
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}") from None
    return json.loads(text)


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("chime").joinpath("presets").iterdir()
                  if p.name.endswith(".json"))


def resolve_config(user: dict) -> dict:
    """Validate a user config and fill in defaults."""
    validate_config(user)
    cfg = deep_merge(DEFAULTS, user)
    ds, df = cfg["dataset"], cfg["diffusion"]
    if df["T"] is None:
        df["T"] = 500 if ds["source"] in SHORT_SCHEDULE_SOURCES else 1000
    if cfg["task"] == "forecast" and ds["h"] < 1:
        raise ConfigError("config error at dataset/h: forecasting needs h >= 1")
    if cfg["task"] == "generation" and ds["h"] != 0:
        raise ConfigError("config error at dataset/h: generation uses h = 0")
    if cfg["multiscale"]["rates"] is None:
        cfg["multiscale"]["rates"] = default_rates(ds["L"])
    return cfg


def config_hash(cfg: dict, drop=("output_dir", "ablations", "checkpoint", "input_csv")) -> str:
    trimmed = {k: v for k, v in cfg.items() if k not in drop}
    return hashlib.sha256(json.dumps(trimmed, sort_keys=True).encode()).hexdigest()[:16]


def training_key(cfg: dict) -> str:
    """Hash of everything that influences model training (hallucination and metrics excluded)."""
    return config_hash({k: v for k, v in cfg.items() if k not in ("hallucination", "metrics", "n_generate")})


def bank_key(cfg: dict) -> str:
    hal = {k: v for k, v in cfg["hallucination"].items() if k not in ("enabled", "target_granularity", "strengths")}
    return config_hash({"train": training_key(cfg), "hallucination": hal})


def apply_ablation(cfg: dict, name: str) -> dict:
    if name in ABLATIONS:
        return deep_merge(cfg, ABLATIONS[name])
    if name in GRANULARITY_ABLATIONS:
        return deep_merge(cfg, {"hallucination": {"enabled": True, "target_granularity": name}})
    valid = list(ABLATIONS) + list(GRANULARITY_ABLATIONS)
    raise ConfigError(f"unknown ablation {name!r}; valid names: {', '.join(valid)}")


def stream(seed: int, name: str) -> Rng:
    return Rng(seed).split(name)


# -- data ----------------------------------------------------------------------
@dataclass
class DataBundle:
    """Windows in normalised [0, 1] units plus the series needed by the bank."""

    train: np.ndarray
    test: np.ndarray
    val: np.ndarray
    normalizer: Normalizer
    train_meta: list[tuple[int, int]]  # (series_id, origin) per training window
    series: dict[int, np.ndarray]  # normalised series by id (training portion only for the target)
    target_history: np.ndarray
    test_start: int  # first target timestep used by any test window
    channel_names: list[str]


def _evenly(items: list, k: int) -> list:
    if len(items) <= k:
        return list(items)
    idx = np.unique(np.linspace(0, len(items) - 1, k).round().astype(int))
    return [items[i] for i in idx]


def prepare_data(cfg: dict) -> DataBundle:
    ds = cfg["dataset"]
    L, h, d = ds["L"], ds["h"], ds["d"]
    span = L + h
    data_seed = int(stream(cfg["seed"], "data").integers(0, 2 ** 31))
    source = ds["source"]
    others: list[tuple[int, np.ndarray]] = []
    if source == "sines":
        windows = generate_sines(ds["n_windows"], span, d, seed=data_seed)
        target = None
        names = [f"ch{j}" for j in range(d)]
    else:
        if source == "regime-shift":
            raw = generate_regime_shift(ds["length"], ds["period"], d, ds["shift_at"], seed=data_seed)
            for i in range(ds["n_sources"]):
                src = generate_regime_shift(ds["length"], ds["period"], d, ds["shift_at"], seed=data_seed + 1 + i)
                others.append((i + 1, src.values))
        else:
            raw = load_csv(source[4:])
            if raw.channels != d:
                raise ConfigError(f"config error at dataset/d: CSV has {raw.channels} channels, config says {d}")
        target = raw.values
        names = raw.channel_names
        windows = window(raw, span, ds["stride"], series_id=0)
    train, test = split_and_subsample(windows, ds["train_frac"], ds["few_shot_frac"], seed=data_seed)
    if not test:
        raise DataError("the test split is empty after purging overlaps; use a longer series")
    val = train[-min(16, len(train)):]
    train_all = list(train)
    for sid, values in others:
        # source subjects contribute all of their windows
        train_all.extend(SeriesWindow(values[s:s + span].copy(), s, sid)
                         for s in range(0, len(values) - span + 1, ds["stride"]))
    norm = fit_normalizer(train_all)
    test = _evenly(test, ds["max_eval_windows"])
    series: dict[int, np.ndarray] = {}
    history = np.zeros((0, d))
    if target is not None:
        end = max(w.origin_index + w.length for w in train)
        history = norm.apply(target[:end])
        series[0] = history
    for sid, values in others:
        series[sid] = norm.apply(values)
    return DataBundle(
        train=norm.apply(stack_windows(train_all)),
        test=norm.apply(stack_windows(test)),
        val=norm.apply(stack_windows(val)),
        normalizer=norm,
        train_meta=[(w.series_id, w.origin_index) for w in train_all],
        series=series,
        target_history=history,
        test_start=min(w.origin_index for w in test),
        channel_names=list(names),
    )


# -- training ------------------------------------------------------------------
def model_spec(cfg: dict) -> ModelSpec:
    ds, ms, df = cfg["dataset"], cfg["multiscale"], cfg["diffusion"]
    task = cfg["task"]
    scale = ScaleConfig(list(ms["rates"]), ms["trend_window"], ms["patch_size"], ms["k"], ms["d_model"],
                        ms["tokens"], ms["heads"], ms["hidden"], ms["mode"])
    train = TrainConfig(T=df["T"], beta1=df["beta1"], betaT=df["betaT"], eta=df["eta"], lr=df["lr"],
                        batch_size=df["batch_size"], steps=df["steps"], paradigm=df["paradigm"],
                        posterior_mean=df["posterior_mean"], proj_weight=df["proj_weight"],
                        ema_decay=df["ema_decay"], seed=cfg["seed"])
    h = ds["L"] if task == "generation" else ds["h"]
    return ModelSpec(ds["L"], h, ds["d"], scale, train, df["hidden"], df["tokens"], df["time_dim"], task,
                     df["center"])


@dataclass
class Trained:
    model: ChimeModel
    history: list[StepLoss]
    bank: HallucinationBank | None = None
    timings: dict = field(default_factory=dict)


def train_model(cfg: dict, data: DataBundle) -> Trained:
    t0 = time.perf_counter()
    model = ChimeModel(model_spec(cfg), rng=stream(cfg["seed"], "init"), normalizer=data.normalizer)
    history = model.fit(data.train, stream(cfg["seed"], "noise"))
    return Trained(model, history, timings={"train_s": time.perf_counter() - t0})


def build_bank(cfg: dict, data: DataBundle, model: ChimeModel | None) -> HallucinationBank:
    """Train the bank on every training series, then fit projections on the model's condition tokens."""
    hal = cfg["hallucination"]
    gran = GranularitySet.from_labels(hal["granularities"])
    series = [data.series[k] for k in sorted(data.series)]
    if not series:
        # windowed sources without a contiguous series: use the training windows as series
        series = list(data.train)
    rng = stream(cfg["seed"], "bank")
    bank = train_bank(series, gran, d_f=hal["d_f"], direction=hal["analogy_direction"], cap=hal["pair_cap"],
                      chunk_segments=hal["chunk_segments"], encoder_steps=hal["encoder_steps"],
                      epochs=hal["epochs"], rng=rng)
    if model is not None and model.spec.task == "forecast":
        fit_bank_projections(bank, cfg, data, model, rng.split("projection"))
    return bank


def fit_bank_projections(bank: HallucinationBank, cfg: dict, data: DataBundle, model: ChimeModel, rng: Rng,
                         max_rows: int = 512) -> None:
    L = cfg["dataset"]["L"]
    rows = np.arange(len(data.train))
    if len(rows) > max_rows:
        rows = np.sort(rng.choice(len(rows), max_rows, replace=False))
    tokens = model.lookback_tokens(data.train[rows, :L])
    targets = {}
    for e in bank.entries:
        keep, segs = [], []
        for r_i, r in enumerate(rows):
            sid, origin = data.train_meta[r]
            end = origin + L
            values = data.series.get(sid)
            if values is not None and e.z <= end <= len(values):
                keep.append(r_i)
                segs.append(values[end - e.z:end])
        feats = e.encoder.encode(np.stack(segs)) if segs else np.zeros((0, bank.d_f))
        targets[e.label] = (np.array(keep, dtype=int), feats)
    bank.fit_projections(tokens, targets, d_m=model.scale_cfg.d_model,
                         steps=cfg["hallucination"]["projection_steps"], rng=rng)


class RunCache:
    """Shares trained models and banks between configurations with equal training keys."""

    def __init__(self):
        self.models: dict[str, Trained] = {}
        self.banks: dict[str, HallucinationBank] = {}
        self.data: dict[str, DataBundle] = {}

    def get_data(self, cfg: dict) -> DataBundle:
        key = config_hash({"dataset": cfg["dataset"], "seed": cfg["seed"]})
        if key not in self.data:
            self.data[key] = prepare_data(cfg)
        return self.data[key]

    def get_model(self, cfg: dict, data: DataBundle) -> Trained:
        key = training_key(cfg)
        if key not in self.models:
            self.models[key] = train_model(cfg, data)
        return self.models[key]

    def get_bank(self, cfg: dict, data: DataBundle, model: ChimeModel) -> HallucinationBank:
        key = bank_key(cfg)
        if key not in self.banks:
            self.banks[key] = build_bank(cfg, data, model)
        return self.banks[key]


# -- evaluation ------------------------------------------------------------------
@dataclass
class EvalResult:
    report: MetricReport
    samples: np.ndarray | None = None
    forecasts: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def evaluate_generation(cfg: dict, data: DataBundle, model: ChimeModel, n: int | None = None) -> EvalResult:
    mc = cfg["metrics"]
    n = n or mc["n_generate"] or len(data.test)
    report = MetricReport(meta={"seed": cfg["seed"], "config_hash": config_hash(cfg), "task": "generation",
                                "n_generate": n, "n_test": len(data.test)})
    enabled = [m for m in mc["enabled"] if m in GENERATION_METRICS]
    vals: dict[str, list[float]] = {m: [] for m in enabled}
    noise_vals: dict[str, list[float]] = {"context_fid": [], "discriminative": []}
    first = None
    for r in range(mc["n_repeats"]):
        rs = stream(cfg["seed"], "metrics").split(f"repeat{r}")
        pick = rs.split("conditions").choice(len(data.train), n, replace=len(data.train) < n)
        gen = model.generate(data.train[np.sort(pick)], n, rs.split("sampling"))
        if first is None:
            first = gen
        eval_seed = int(rs.split("evaluators").integers(0, 2 ** 31))
        emb = None
        if "context_fid" in enabled:
            emb = Embedder(model.spec.h, model.spec.d, rng=rs.split("embedder")).fit(
                data.train, steps=mc["embedder_steps"], rng=rs.split("embedder-batches"))
            vals["context_fid"].append(context_fid(data.test, gen, emb))
        if "correlation" in enabled and model.spec.d >= 2:
            vals["correlation"].append(correlation_score(data.test, gen, mc["correlation_prefactor"]))
        if "discriminative" in enabled:
            vals["discriminative"].append(discriminative_score(data.test, gen, eval_seed))
        if "predictive" in enabled:
            vals["predictive"].append(predictive_score(data.test, gen, eval_seed))
        if mc["reference_noise"]:
            noise = rs.split("white-noise").uniform(data.test.shape)
            if emb is not None:
                noise_vals["context_fid"].append(context_fid(data.test, noise, emb))
            if "discriminative" in enabled:
                noise_vals["discriminative"].append(discriminative_score(data.test, noise, eval_seed))
    for m, v in vals.items():
        if v:
            report.add(m, v)
    for m, v in noise_vals.items():
        if v:
            report.add(f"white_noise_{m}", v)
    return EvalResult(report, samples=first)


def naive_forecast(lookbacks: np.ndarray, h: int) -> np.ndarray:
    """Repeat-last-value baseline."""
    return np.repeat(lookbacks[:, -1:, :], h, axis=1)


def _refiner(cfg: dict, data: DataBundle, bank: HallucinationBank | None, strength: float):
    if bank is None:
        return None
    target = cfg["hallucination"]["target_granularity"]
    return lambda c: hallucinate(c, data.target_history, target, bank, strength)


def select_strength(cfg: dict, data: DataBundle, model: ChimeModel,
                    bank: HallucinationBank) -> tuple[float, dict[str, float]]:
    """Pick the refinement strength with the lowest validation MSE (ties go to the weaker one)."""
    mc, L = cfg["metrics"], cfg["dataset"]["L"]
    selection = {}
    for lam in cfg["hallucination"]["strengths"]:
        # every candidate sees the same sampling noise, so only the strength differs
        pred = model.forecast(data.val[:, :L], stream(cfg["seed"], "fh-select"), mc["forecast_samples"],
                              _refiner(cfg, data, bank, lam))
        selection[repr(float(lam))] = mse_mae(pred, data.val[:, L:])[0]
    strength = float(min(cfg["hallucination"]["strengths"], key=lambda s: (selection[repr(float(s))], s)))
    bank.strength = strength
    return strength, selection


def evaluate_forecast(cfg: dict, data: DataBundle, model: ChimeModel,
                      bank: HallucinationBank | None = None) -> EvalResult:
    mc, L, h = cfg["metrics"], cfg["dataset"]["L"], cfg["dataset"]["h"]
    report = MetricReport(meta={"seed": cfg["seed"], "config_hash": config_hash(cfg), "task": "forecast",
                                "n_test": len(data.test), "forecast_samples": mc["forecast_samples"]})
    strength = 0.0
    if bank is not None:
        strength, selection = select_strength(cfg, data, model, bank)
        report.meta["fh_strength"] = strength
        report.meta["fh_validation_mse"] = selection
        report.meta["target_granularity"] = cfg["hallucination"]["target_granularity"]
    mses, maes = [], []
    first = None
    for r in range(mc["n_repeats"]):
        rs = stream(cfg["seed"], "metrics").split(f"repeat{r}")
        pred = model.forecast(data.test[:, :L], rs.split("sampling"), mc["forecast_samples"],
                              _refiner(cfg, data, bank, strength))
        if first is None:
            first = pred
        mse, mae = mse_mae(pred, data.test[:, L:])
        mses.append(mse)
        maes.append(mae)
    if "mse" in mc["enabled"] or "mse" not in mc["enabled"] and "mae" not in mc["enabled"]:
        report.add("mse", mses)
    if "mae" in mc["enabled"] or "mse" not in mc["enabled"] and "mae" not in mc["enabled"]:
        report.add("mae", maes)
    n_mse, n_mae = mse_mae(naive_forecast(data.test[:, :L], h), data.test[:, L:])
    report.add("naive_mse", [n_mse])
    report.add("naive_mae", [n_mae])
    return EvalResult(report, forecasts=first)


def run_experiment(cfg: dict, cache: RunCache | None = None) -> tuple[EvalResult, Trained]:
    cache = cache or RunCache()
    data = cache.get_data(cfg)
    trained = cache.get_model(cfg, data)
    if cfg["task"] == "generation":
        return evaluate_generation(cfg, data, trained.model), trained
    bank = cache.get_bank(cfg, data, trained.model) if cfg["hallucination"]["enabled"] else None
    return evaluate_forecast(cfg, data, trained.model, bank), trained


# -- output helpers ------------------------------------------------------------
def loss_curve_csv(history: list[StepLoss]) -> str:
    lines = ["step,total,unconditional,conditional,projection"]
    lines += [f"{i},{p.total!r},{p.unconditional!r},{p.conditional!r},{p.projection!r}" for i, p in enumerate(history)]
    return "\n".join(lines) + "\n"


def write_generation_plots(out: Path, real: np.ndarray, gen: np.ndarray) -> None:
    """PCA scatter and marginal-density tables plus their SVG renderings under ``out/plots``."""
    plots = Path(out) / "plots"
    pca = pca_project(real, gen)
    rows = ["set,pc1,pc2"]
    rows += [f"real,{a!r},{b!r}" for a, b in pca.real]
    rows += [f"generated,{a!r},{b!r}" for a, b in pca.gen]
    write_text(plots / "pca.csv", "\n".join(rows) + "\n")
    write_text(plots / "pca.svg", svg_plot({"real": (pca.real[:, 0], pca.real[:, 1]),
                                            "generated": (pca.gen[:, 0], pca.gen[:, 1])}, "scatter", "PCA"))
    centers, hr, hg = marginal_density(real, gen)
    dens = ["value,real,generated"] + [f"{c!r},{a!r},{b!r}" for c, a, b in zip(centers, hr, hg)]
    write_text(plots / "marginal_density.csv", "\n".join(dens) + "\n")
    write_text(plots / "marginal_density.svg", svg_plot({"real": (centers, hr), "generated": (centers, hg)},
                                                        "line", "Marginal density"))


def write_forecast_plot(out: Path, lookback: np.ndarray, truth: np.ndarray | None, pred: np.ndarray) -> None:
    """First channel of one forecast against its lookback and (when known) the truth."""
    plots = Path(out) / "plots"
    L, h = len(lookback), len(pred)
    rows = ["step,lookback,truth,forecast"]
    for i in range(L):
        rows.append(f"{i},{lookback[i, 0]!r},,")
    for j in range(h):
        tv = "" if truth is None else repr(truth[j, 0])
        rows.append(f"{L + j},,{tv},{pred[j, 0]!r}")
    write_text(plots / "forecast.csv", "\n".join(rows) + "\n")
    series = {"lookback": (np.arange(L), lookback[:, 0]), "forecast": (np.arange(L, L + h), pred[:, 0])}
    if truth is not None:
        series["truth"] = (np.arange(L, L + h), truth[:, 0])
    write_text(plots / "forecast.svg", svg_plot(series, "line", "Forecast (channel 0)"))


def loss_curve_svg(history: list[StepLoss]) -> str:
    steps = np.arange(len(history))
    return svg_plot({"total": (steps, np.array([p.total for p in history]))}, "line", "Training loss")


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def summarize_losses(history: list[StepLoss], window: int = 100) -> dict:
    tot = np.array([p.total for p in history])
    if len(tot) == 0:
        return {}
    w = min(window, len(tot))
    first, last = float(tot[:w].mean()), float(tot[-w:].mean())
    return {"first_window_mean": first, "last_window_mean": last,
            "ratio": last / first if first > 0 else math.nan, "steps": len(tot)}


# -- ablations -----------------------------------------------------------------
DEFAULT_ABLATIONS = ("full", "no-multiscale", "average-weight", "no-fh", "eps-attn", "data-recon", "attn-original")


@dataclass
class AblationRow:
    name: str
    config_hash: str
    changed: list[str]
    report: MetricReport
    history: list[StepLoss]


def run_ablation(cfg: dict, names: list[str], threads: int = 1, cache: RunCache | None = None) -> list[AblationRow]:
    """Evaluate each named variant; variants sharing a training key reuse one trained model.

    Groups of variants with distinct training keys may run on separate threads;
    results are deterministic because every stream is derived from the config seed.
    """
    from concurrent.futures import ThreadPoolExecutor

    if not names:
        raise ConfigError("config error at ablations: list at least one ablation name")
    cfgs = {n: resolve_row(cfg, n) for n in names}
    groups: dict[str, list[str]] = {}
    for n in names:
        groups.setdefault(training_key(cfgs[n]), []).append(n)
    shared = cache or RunCache()
    shared.get_data(cfg)  # every variant shares the dataset; prepare it once before threads start

    def run_group(members: list[str]) -> list[AblationRow]:
        rows = []
        for n in members:
            res, trained = run_experiment(cfgs[n], shared)
            changed = [c for c in config_diff(cfg, cfgs[n]) if c != "ablations"]
            rows.append(AblationRow(n, config_hash(cfgs[n]), changed, res.report, trained.history))
        return rows

    if threads <= 1 or len(groups) == 1:
        done = [run_group(m) for m in groups.values()]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(run_group, groups.values()))
    by_name = {r.name: r for rows in done for r in rows}
    return [by_name[n] for n in names]


def resolve_row(cfg: dict, name: str) -> dict:
    row = apply_ablation(cfg, name)
    if row["task"] == "generation" and row["hallucination"]["enabled"]:
        # hallucination refines forecasting conditions only
        row = deep_merge(row, {"hallucination": {"enabled": False}})
    return row


def ablation_tables(rows: list[AblationRow]) -> tuple[dict, str]:
    """``(report dict, csv text)``; a pure granularity sweep is laid out one column per granularity."""
    metrics = sorted({m for r in rows for m in r.report.values})
    report = {"rows": {r.name: {"config_hash": r.config_hash, "changed": r.changed, "meta": r.report.meta,
                                "metrics": r.report.to_dict()["metrics"]} for r in rows},
              "order": [r.name for r in rows]}
    lines = []
    if all(r.name in GRANULARITY_ABLATIONS for r in rows):
        lines.append(",".join(["metric"] + [r.name for r in rows]))
        for m in metrics:
            lines.append(",".join([m] + [repr(r.report.values[m][0]) if m in r.report.values else ""
                                         for r in rows]))
    else:
        lines.append(",".join(["variant"] + metrics))
        for r in rows:
            lines.append(",".join([r.name] + [repr(r.report.values[m][0]) if m in r.report.values else ""
                                              for m in metrics]))
    return report, "\n".join(lines) + "\n"
