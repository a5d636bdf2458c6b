"""Command-line entry point: ``chime <command> --config <path> [--preset] [--out] [--seed]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from chime import hallucination
from chime import pipeline as P
from chime.data import DataError, load_csv
from chime.diffusion import NumericalAbort, StateError
from chime.hallucination import HallucinationBank, hallucinate
from chime.metrics import (
    Embedder,
    MetricError,
    MetricReport,
    context_fid,
    correlation_score,
    discriminative_score,
    mse_mae,
    predictive_score,
    write_text,
)
from chime.model import ChimeModel, write_json
from chime.numerics.checkpoint import CheckpointError
from chime.numerics.nn import ConfigurationError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4

COMMANDS = ("train", "generate", "forecast", "eval", "ablate", "hallucinate-train")


def build_config(args: argparse.Namespace) -> dict:
    if args.config is None and args.preset is None:
        raise P.ConfigError("give --config, --preset, or both")
    base = P.load_preset(args.preset) if args.preset else {}
    user = {}
    if args.config is not None:
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise P.ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise P.ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise P.ConfigError("config error at <root>: expected a JSON object")
    merged = P.deep_merge(base, user)
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.out is not None:
        merged["output_dir"] = args.out
    return P.resolve_config(merged)


class Run:
    """Output directory, timings and the run record shared by all commands."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def timed(self, name: str, fn, *a, **kw):
        t = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            self.timings[name] = round(time.perf_counter() - t, 3)

    def report(self, report: MetricReport) -> None:
        report.meta.setdefault("command", self.command)
        write_text(self.out / "report.json", report.to_json())
        write_text(self.out / "report.csv", report.to_csv())

    def losses(self, history) -> None:
        write_text(self.out / "loss_curve.csv", P.loss_curve_csv(history))
        if history:
            write_text(self.out / "plots" / "loss_curve.svg", P.loss_curve_svg(history))

    def record(self, **extra) -> None:
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        write_json(self.out / "record.json", {
            "command": self.command, "build": P.build_id(), "config": self.cfg,
            "config_hash": P.config_hash(self.cfg), "seed": self.cfg["seed"], "timings_s": self.timings,
            **extra})


def _model(run: Run, data: P.DataBundle) -> tuple[ChimeModel, list]:
    """Restore the configured checkpoint or train a fresh model (saved under ``out/checkpoint``)."""
    ckpt = run.cfg.get("checkpoint")
    if ckpt:
        model = run.timed("load", ChimeModel.load, ckpt)
        spec = P.model_spec(run.cfg)
        if (model.spec.L, model.spec.h, model.spec.d, model.spec.task) != (spec.L, spec.h, spec.d, spec.task):
            raise CheckpointError(
                f"checkpoint {ckpt} holds a {model.spec.task} model with L={model.spec.L}, h={model.spec.h}, "
                f"d={model.spec.d}; the config asks for {spec.task} with L={spec.L}, h={spec.h}, d={spec.d}")
        if model.normalizer is None:
            model.normalizer = data.normalizer
        return model, []
    trained = run.timed("train", P.train_model, run.cfg, data)
    trained.model.save(run.out / "checkpoint")
    return trained.model, trained.history


def _bank(run: Run, data: P.DataBundle, model: ChimeModel) -> HallucinationBank | None:
    if not (run.cfg["hallucination"]["enabled"] and run.cfg["task"] == "forecast"):
        return None
    ckpt = run.cfg.get("checkpoint")
    if ckpt and (Path(ckpt).parent / "bank" / "bank.json").exists():
        return HallucinationBank.load(Path(ckpt).parent / "bank")
    return run.timed("bank", P.build_bank, run.cfg, data, model)


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    data = run.timed("data", P.prepare_data, cfg)
    trained = run.timed("train", P.train_model, cfg, data)
    trained.model.save(run.out / "checkpoint")
    report = MetricReport(meta={"seed": cfg["seed"], "config_hash": P.config_hash(cfg), "task": cfg["task"],
                                "n_train_windows": int(len(data.train)),
                                "n_params": int(trained.model.store.n_params())})
    summary = P.summarize_losses(trained.history)
    for k in ("first_window_mean", "last_window_mean", "ratio"):
        if k in summary:
            report.add(f"loss_{k}", [summary[k]])
    bank = _bank(run, data, trained.model)
    if bank is not None:
        strength, table = run.timed("fh_select", P.select_strength, cfg, data, trained.model, bank)
        bank.save(run.out / "bank")
        report.meta["fh_strength"] = strength
        report.meta["fh_validation_mse"] = table
    run.losses(trained.history)
    run.report(report)
    run.record(checkpoint=str(run.out / "checkpoint"))


def _sample_files(run: Run, samples01: np.ndarray, model: ChimeModel, names: list[str]) -> None:
    raw = model.normalizer.invert(samples01) if model.normalizer is not None else samples01
    sdir = run.out / "samples"
    files = []
    for i, s in enumerate(raw):
        name = f"sample_{i:04d}.csv"
        lines = [",".join(names)] + [",".join(repr(float(v)) for v in row) for row in s]
        write_text(sdir / name, "\n".join(lines) + "\n")
        files.append(name)
    write_json(run.out / "samples.json", {"n": len(raw), "length": int(raw.shape[1]), "channels": names,
                                          "units": "raw" if model.normalizer is not None else "normalised",
                                          "seed": run.cfg["seed"], "files": files})


def cmd_generate(run: Run) -> None:
    cfg = run.cfg
    if cfg["task"] != "generation":
        raise P.ConfigError("config error at task: generate needs task = generation")
    data = run.timed("data", P.prepare_data, cfg)
    model, history = _model(run, data)
    if cfg.get("n_generate") == 0:
        raise P.ConfigError("config error at n_generate: ask for at least one sample")
    n = cfg.get("n_generate") or cfg["metrics"]["n_generate"] or len(data.test)
    rs = P.stream(cfg["seed"], "generate")
    pick = rs.split("conditions").choice(len(data.train), n, replace=len(data.train) < n)
    gen = run.timed("sample", model.generate, data.train[np.sort(pick)], n, rs.split("sampling"))
    _sample_files(run, gen, model, data.channel_names)
    mc = cfg["metrics"]
    report = MetricReport(meta={"seed": cfg["seed"], "config_hash": P.config_hash(cfg), "n_generate": n,
                                "n_test": len(data.test)})
    eval_seed = int(rs.split("evaluators").integers(0, 2 ** 31))
    if "context_fid" in mc["enabled"]:
        emb = Embedder(model.spec.h, model.spec.d, rng=rs.split("embedder")).fit(
            data.train, steps=mc["embedder_steps"], rng=rs.split("embedder-batches"))
        report.add("context_fid", [context_fid(data.test, gen, emb)])
    if "correlation" in mc["enabled"] and model.spec.d >= 2:
        report.add("correlation", [correlation_score(data.test, gen, mc["correlation_prefactor"])])
    if "discriminative" in mc["enabled"]:
        report.add("discriminative", [discriminative_score(data.test, gen, eval_seed)])
    if "predictive" in mc["enabled"]:
        report.add("predictive", [predictive_score(data.test, gen, eval_seed)])
    P.write_generation_plots(run.out, data.test, gen)
    if history:
        run.losses(history)
    run.report(report)
    run.record()


def cmd_forecast(run: Run) -> None:
    cfg = run.cfg
    if cfg["task"] != "forecast":
        raise P.ConfigError("config error at task: forecast needs task = forecast")
    if not cfg.get("input_csv"):
        raise P.ConfigError("config error at input_csv: forecast needs an input CSV of recent history")
    data = run.timed("data", P.prepare_data, cfg)
    model, history = _model(run, data)
    L, h = model.spec.L, model.spec.h
    raw = load_csv(cfg["input_csv"])
    if raw.channels != model.spec.d:
        raise DataError(f"input CSV has {raw.channels} channels; the model expects d = {model.spec.d}")
    if raw.length < L:
        raise DataError(f"input CSV holds {raw.length} steps; forecasting needs at least L = {L}")
    values = model.normalizer.apply(raw.values)
    scored = raw.length >= L + h
    end = raw.length - h if scored else raw.length
    lookback, truth = values[end - L:end], (values[end:end + h] if scored else None)
    bank = _bank(run, data, model)
    refine = None
    if bank is not None:
        if not cfg.get("checkpoint"):
            P.select_strength(cfg, data, model, bank)
        target = cfg["hallucination"]["target_granularity"]
        support = values[:end]
        refine = lambda c: hallucinate(c, support, target, bank, bank.strength)
    pred = run.timed("forecast", model.forecast, lookback[None], P.stream(cfg["seed"], "forecast"),
                     cfg["metrics"]["forecast_samples"], refine)[0]
    out_raw = model.normalizer.invert(pred)
    lines = [",".join(raw.channel_names)] + [",".join(repr(float(v)) for v in row) for row in out_raw]
    write_text(run.out / "forecast.csv", "\n".join(lines) + "\n")
    report = MetricReport(meta={"seed": cfg["seed"], "config_hash": P.config_hash(cfg), "L": L, "h": h,
                                "scored": scored, "hallucination": bank is not None})
    if scored:
        mse, mae = mse_mae(pred[None], truth[None])
        report.add("mse", [mse])
        report.add("mae", [mae])
    P.write_forecast_plot(run.out, lookback, truth, pred)
    if history:
        run.losses(history)
    run.report(report)
    run.record()


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    cache = P.RunCache()
    data = run.timed("data", cache.get_data, cfg)
    if cfg.get("checkpoint"):
        model, _ = _model(run, data)
        cache.models[P.training_key(cfg)] = P.Trained(model, [])
    res, trained = run.timed("evaluate", P.run_experiment, cfg, cache)
    if res.samples is not None:
        P.write_generation_plots(run.out, data.test, res.samples)
    if res.forecasts is not None:
        L = cfg["dataset"]["L"]
        P.write_forecast_plot(run.out, data.test[0, :L], data.test[0, L:], res.forecasts[0])
    if trained.history:
        run.losses(trained.history)
    run.report(res.report)
    run.record()


def cmd_ablate(run: Run) -> None:
    cfg = run.cfg
    names = cfg.get("ablations") or list(P.DEFAULT_ABLATIONS)
    for n in names:
        P.apply_ablation(cfg, n)  # reject unknown names before any training
    threads = max(1, int(os.environ.get("CHIME_THREADS", "1") or 1))
    rows = run.timed("ablate", P.run_ablation, cfg, names, threads)
    for r in rows:
        rdir = run.out / "rows" / r.name
        write_text(rdir / "report.json", r.report.to_json())
        write_text(rdir / "report.csv", r.report.to_csv())
        write_text(rdir / "loss_curve.csv", P.loss_curve_csv(r.history))
    report, table = P.ablation_tables(rows)
    report["meta"] = {"seed": cfg["seed"], "config_hash": P.config_hash(cfg), "command": "ablate"}
    write_text(run.out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_text(run.out / "report.csv", table)
    run.record(threads=threads)


def cmd_hallucinate_train(run: Run) -> None:
    cfg = run.cfg
    data = run.timed("data", P.prepare_data, cfg)
    model = None
    if cfg.get("checkpoint") and cfg["task"] == "forecast":
        model, _ = _model(run, data)
    bank = run.timed("bank", P.build_bank, cfg, data, model)
    bank.save(run.out / "bank")
    report = MetricReport(meta={"seed": cfg["seed"], "config_hash": P.config_hash(cfg),
                                "granularities": bank.labels, "projections": bank.has_projections})
    for e in bank.entries:
        hist = e.history.loss
        write_text(run.out / "bank" / e.label / "loss_curve.csv",
                   "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(hist)))
        report.add(f"{e.label}.best_loss", [e.history.best[-1]])
        report.add(f"{e.label}.n_quadruples", [e.n_quadruples])
    run.report(report)
    run.record()


HANDLERS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "hallucinate-train": cmd_hallucinate_train,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chime", description="Multi-scale conditional diffusion for time series.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--preset", help=f"built-in preset ({', '.join(P.list_presets())})")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides seed)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    cfg = None
    try:
        cfg = build_config(args)
        run = Run(args.command, cfg)
        HANDLERS[args.command](run)
    except NumericalAbort as exc:
        out = Path(cfg["output_dir"] if cfg else ".")
        write_json(out / "diagnostics.json", exc.diagnostics)
        print(f"chime: numerical abort: {exc} (diagnostics in {out / 'diagnostics.json'})", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"chime: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigurationError, DataError, MetricError, StateError, hallucination.StateError) as exc:
        print(f"chime: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
