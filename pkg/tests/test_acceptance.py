"""Acceptance criteria, one test each; every test prints a single pass/fail line.

The end-to-end criteria (5 and 6) train full desk-scale models and take tens of
minutes on one CPU. They share trained models through module fixtures.
"""
import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chime import pipeline as P
from chime.cli import main
from chime.data import generate_regime_shift, generate_sines, stack_windows
from chime.diffusion import forward_sample, linear_schedule
from chime.hallucination import (
    Hallucinator,
    hallucination_loss,
    linear_analogy_dataset,
    quadruple_arrays,
    segment,
    train_hallucinator,
)
from chime.metrics import Embedder, GaussianStats, context_fid, correlation_score, frechet_distance
from chime.multiscale import downsample, topk_renormalize, trend_seasonal
from chime.numerics import ParamStore, Rng, Tensor, gru_forward, init_attention, init_gru, init_mlp, mlp_forward
from chime.numerics import multi_head_attention
from conftest import finite_difference_grads, max_relative_error

SEEDS = (0, 1, 2)


# -- 1: gradients ------------------------------------------------------------------
def small_network(kind: str, rng: Rng):
    """``(loss_fn, params)`` for a random network of at most 200 parameters."""
    store = ParamStore()
    if kind == "mlp":
        dims = [int(rng.integers(2, 5)), int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(1, 3))]
        act = ("tanh", "gelu", "sigmoid")[int(rng.integers(0, 3))]
        layers = init_mlp(store, "m", dims, rng, activation=act)
        x = Tensor(rng.normal((4, dims[0])))
        forward = lambda: mlp_forward(layers, x)  # noqa: E731
    elif kind == "mha":
        params = init_attention(store, "a", 4, rng)
        q, kv = Tensor(rng.normal((3, 4))), Tensor(rng.normal((int(rng.integers(2, 6)), 4)))
        forward = lambda: multi_head_attention(q, kv, kv, 2, params)  # noqa: E731
    else:
        d_in, d_h = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        params = init_gru(store, "g", d_in, d_h, rng)
        seq = Tensor(rng.normal((2, int(rng.integers(2, 5)), d_in)))
        forward = lambda: gru_forward(params, seq)  # noqa: E731
    for p in store.values():
        # move biases away from zero so every parameter gets a generic gradient
        p.data += 0.1 * rng.normal(p.data.shape)
    out_shape = forward().shape
    w = Tensor(rng.normal(out_shape))

    def loss():
        out = forward()
        return (out * w).sum() + (out * out).mean()

    assert store.n_params() <= 200, (kind, store.n_params())
    return loss, list(store.values())


def test_criterion_01_gradients(verdict):
    t0 = time.perf_counter()
    kinds = ["mlp"] * 7 + ["mha"] * 7 + ["gru"] * 6
    worst, sizes = 0.0, []
    for i, kind in enumerate(kinds):
        loss, params = small_network(kind, Rng(100 + i))
        for p in params:
            p.grad = None
        loss().backward()
        analytic = [p.grad for p in params]
        worst = max(worst, max_relative_error(analytic, finite_difference_grads(loss, params)))
        sizes.append(sum(p.data.size for p in params))
    dt = time.perf_counter() - t0
    verdict(1, "autodiff vs central differences", worst < 1e-6 and dt < 30,
            f"20 networks ({min(sizes)}-{max(sizes)} params), max rel err {worst:.2e} < 1e-6, {dt:.1f}s < 30s")


# -- 2: schedule ---------------------------------------------------------------------
def test_criterion_02_schedule(verdict):
    t0 = time.perf_counter()
    s = linear_schedule(500, 1e-4, 5e-2)
    ok = (s.beta[1] == 1e-4 and s.beta[500] == 5e-2 and bool(np.all(np.diff(s.alpha_bar) < 0))
          and s.alpha_bar[500] < 1e-4)
    dt = time.perf_counter() - t0
    verdict(2, "linear schedule constants", ok and dt < 1,
            f"beta[1]={float(s.beta[1])!r}, beta[500]={float(s.beta[500])!r}, alpha_bar strictly decreasing, "
            f"alpha_bar[500]={s.alpha_bar[500]:.3e} < 1e-4, {dt * 1e3:.1f}ms")


# -- 3: forward moments -----------------------------------------------------------
def test_criterion_03_forward_moments(verdict):
    t0 = time.perf_counter()
    s = linear_schedule(500)
    rng = Rng(3)
    X0 = rng.normal((6, 2))
    n, t = 20_000, 250
    eps = rng.normal((n, 6, 2))
    Xt = forward_sample(np.broadcast_to(X0, eps.shape), np.full(n, t), eps, s)
    ab = s.alpha_bar[t]
    mean = Xt.mean(axis=0)
    se = Xt.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(mean - np.sqrt(ab) * X0) / se
    var = float(np.mean((Xt - Xt.mean(axis=0)) ** 2) * n / (n - 1))
    rel = abs(var / (1 - ab) - 1)
    dt = time.perf_counter() - t0
    verdict(3, "forward-process moments at t=250", float(z.max()) < 3 and rel < 0.02 and dt < 30,
            f"max |mean err|/SE {z.max():.2f} < 3 over {z.size} coords, pooled var rel err {rel:.4f} < 0.02, "
            f"{dt:.1f}s")


# -- 4: metric oracles --------------------------------------------------------------
def test_criterion_04_metric_oracles(verdict):
    t0 = time.perf_counter()
    S = stack_windows(generate_sines(64, 24, 5, seed=4)) * 0.5 + 0.5
    emb = Embedder(24, 5, rng=Rng(4)).fit(S, steps=50, rng=Rng(5))
    fid_self = context_fid(S, S, emb)
    mu = Rng(6).normal(7)
    injected = frechet_distance(GaussianStats(np.zeros(7), np.eye(7)), GaussianStats(mu, np.eye(7)))
    inj_err = abs(injected - float(mu @ mu))
    corr_self = correlation_score(S, S)
    ori = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])[None]
    gen = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])[None]
    hand_err = abs(correlation_score(ori, gen) - 0.2)
    dt = time.perf_counter() - t0
    ok = fid_self < 1e-8 and inj_err < 1e-8 and corr_self == 0 and hand_err < 1e-12 and dt < 10
    verdict(4, "metric oracles", ok,
            f"context_fid(S,S)={fid_self:.1e}, injected-stats err {inj_err:.1e}, correlation(S,S)={corr_self}, "
            f"hand case err {hand_err:.1e}, {dt:.1f}s")


# -- 5 and 6: end-to-end runs -------------------------------------------------------
def preset(name: str, seed: int, **overrides) -> dict:
    return P.resolve_config(P.deep_merge(P.load_preset(name), {"seed": seed, **overrides}))


@pytest.fixture(scope="module")
def sines_runs():
    """Full CHIME on the Sines smoke setup per seed, plus the no-multiscale row."""
    runs = []
    for seed in SEEDS:
        cfg = preset("sines-smoke", seed)
        cache = P.RunCache()
        t0 = time.perf_counter()
        full, trained = P.run_experiment(cfg, cache)
        t_full = time.perf_counter() - t0
        row = P.deep_merge(P.apply_ablation(cfg, "no-multiscale"), {"metrics": {"enabled": ["context_fid"]}})
        t0 = time.perf_counter()
        noms, _ = P.run_experiment(row, cache)
        runs.append({"full": full.report.values, "no_ms": noms.report.values,
                     "loss": P.summarize_losses(trained.history), "t_full": t_full,
                     "t_noms": time.perf_counter() - t0})
    return runs


@pytest.fixture(scope="module")
def fewshot_runs():
    """Full CHIME against the same model without feature hallucination on the few-shot setup."""
    runs = []
    for seed in SEEDS:
        cfg = preset("fewshot-demo", seed)
        cache = P.RunCache()
        t0 = time.perf_counter()
        full, _ = P.run_experiment(cfg, cache)
        nofh, _ = P.run_experiment(P.apply_ablation(cfg, "no-fh"), cache)
        runs.append({"full": full.report.values["mse"][0], "no_fh": nofh.report.values["mse"][0],
                     "strength": full.report.meta["fh_strength"], "t": time.perf_counter() - t0})
    return runs


@pytest.mark.slow
def test_criterion_05_sines_smoke(verdict, sines_runs):
    loss_ratio = [r["loss"]["ratio"] for r in sines_runs]
    fid_ratio = [r["full"]["context_fid"][0] / r["full"]["white_noise_context_fid"][0] for r in sines_runs]
    disc_gap = [r["full"]["white_noise_discriminative"][0] - r["full"]["discriminative"][0] for r in sines_runs]
    times = [r["t_full"] for r in sines_runs]
    med = {k: float(np.median(v)) for k, v in
           {"loss": loss_ratio, "fid": fid_ratio, "disc": disc_gap, "time": times}.items()}
    ok = med["loss"] < 0.5 and med["fid"] < 0.3 and med["disc"] >= 0.1 and med["time"] < 15 * 60
    per_seed = "; ".join(f"seed {s}: {a:.3f}/{b:.3f}/{c:.3f}" for s, a, b, c in
                         zip(SEEDS, loss_ratio, fid_ratio, disc_gap))
    verdict(5, "Sines smoke, median of 3 seeds", ok,
            f"loss ratio {med['loss']:.3f} < 0.5, FID ratio {med['fid']:.3f} < 0.3, "
            f"discriminative gap {med['disc']:.3f} >= 0.1, {med['time'] / 60:.1f} min/seed < 15 "
            f"[{per_seed}]")


@pytest.mark.slow
def test_criterion_06_ablation_ordering(verdict, sines_runs, fewshot_runs):
    fid_full = [r["full"]["context_fid"][0] for r in sines_runs]
    fid_noms = [r["no_ms"]["context_fid"][0] for r in sines_runs]
    mse_full = [r["full"] for r in fewshot_runs]
    mse_nofh = [r["no_fh"] for r in fewshot_runs]
    total = sum(r["t_full"] + r["t_noms"] for r in sines_runs) + sum(r["t"] for r in fewshot_runs)
    med = [float(np.median(v)) for v in (fid_full, fid_noms, mse_full, mse_nofh)]
    ok = med[0] <= med[1] and med[2] <= med[3] and total < 45 * 60
    strengths = ",".join(f"{r['strength']:g}" for r in fewshot_runs)
    verdict(6, "ablation ordering, median of 3 seeds", ok,
            f"Context-FID full {med[0]:.4f} <= no-multiscale {med[1]:.4f}; few-shot MSE full {med[2]:.5f} "
            f"<= no-fh {med[3]:.5f} (selected strengths {strengths}); {total / 60:.1f} min < 45 "
            f"[FID full/no-ms {' '.join(f'{a:.4f}/{b:.4f}' for a, b in zip(fid_full, fid_noms))}; "
            f"MSE full/no-fh {' '.join(f'{a:.5f}/{b:.5f}' for a, b in zip(mse_full, mse_nofh))}]")


# -- 7: hallucinator ------------------------------------------------------------------
def test_criterion_07_hallucinator(verdict):
    t0 = time.perf_counter()
    train = linear_analogy_dataset(2000, 16, seed=0)
    test = quadruple_arrays(linear_analogy_dataset(500, 16, seed=1))
    H, _ = train_hallucinator(train, 168, epochs=40, rng=Rng(0))
    held_out = hallucination_loss(H, test).item()
    ident = Hallucinator(16, rng=Rng(0))
    ident.set_identity()
    identity = hallucination_loss(ident, test).item()
    dt = time.perf_counter() - t0
    verdict(7, "hallucinator on linear analogies", held_out < 0.5 * identity and dt < 120,
            f"held-out L_H {held_out:.4f} < 0.5 x identity {identity:.4f}, {dt:.1f}s < 120s")


# -- 8: downsampling, segmentation, decomposition ---------------------------------------
CRIT8 = {"cases": 0, "worst": 0.0, "t0": None}


@settings(max_examples=200, deadline=None)
@given(L=st.integers(1, 60), d=st.integers(1, 4), s=st.integers(1, 60), z=st.integers(1, 60),
       w=st.integers(1, 9), seed=st.integers(0, 2 ** 16))
def check_scale_formulas(L, d, s, z, w, seed):
    X = np.random.default_rng(seed).normal(size=(L, d))
    s, z = min(s, L), min(z, L)
    D = downsample(X, s).data
    assert D.shape == (L // s, d)
    for j in range(L // s):
        np.testing.assert_allclose(D[j], X[j * s:(j + 1) * s].mean(axis=0), rtol=0, atol=1e-12)
    segs = segment(X, z)
    assert len(segs) == L // z and all(g.shape == (z, d) for g in segs)
    if segs:
        assert np.array_equal(np.concatenate(segs), X[: (L // z) * z])
    trend, seasonal = trend_seasonal(X, w)
    err = float(np.abs(trend.data + seasonal.data - X).max())
    assert err <= 1e-12
    CRIT8["cases"] += 1
    CRIT8["worst"] = max(CRIT8["worst"], err)


def test_criterion_08_scale_formulas(verdict):
    t0 = time.perf_counter()
    check_scale_formulas()
    dt = time.perf_counter() - t0
    verdict(8, "downsample, segmentation and decomposition", dt < 10,
            f"{CRIT8['cases']} random (L, s, z) cases: means and floor counts exact, segments disjoint, "
            f"trend+seasonal err {CRIT8['worst']:.1e} <= 1e-12, {dt:.1f}s < 10s")


# -- 9: determinism -------------------------------------------------------------------
def test_criterion_09_determinism(verdict, tmp_path):
    gen = {"diffusion": {"steps": 30, "T": 50}, "dataset": {"n_windows": 200, "max_eval_windows": 40},
           "metrics": {"embedder_steps": 20}}
    fs = {"diffusion": {"steps": 20, "T": 50}, "dataset": {"length": 1200, "max_eval_windows": 4},
          "hallucination": {"encoder_steps": 20, "epochs": 3, "projection_steps": 10,
                            "granularities": ["1day", "2days"]},
          "metrics": {"forecast_samples": 2}}
    hist = generate_regime_shift(400, 24, 2, 0.5, seed=3).values[:250]
    (tmp_path / "hist.csv").write_text("a,b\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in hist))
    commands = [
        ("train", "sines-smoke", gen, ("report.json", "loss_curve.csv")),
        ("eval", "sines-smoke", gen, ("report.json", "loss_curve.csv")),
        ("ablate", "sines-smoke", {**gen, "ablations": ["full", "average-weight"]},
         ("report.json", "rows/full/loss_curve.csv", "rows/average-weight/loss_curve.csv")),
        ("train", "fewshot-demo", fs, ("report.json", "loss_curve.csv")),
        ("forecast", "fewshot-demo", {**fs, "input_csv": str(tmp_path / "hist.csv")},
         ("report.json", "loss_curve.csv", "forecast.csv")),
        ("hallucinate-train", "fewshot-demo", fs, ("report.json", "bank/1day/loss_curve.csv")),
        ("generate", "sines-smoke", {**gen, "checkpoint": str(tmp_path / "r0" / "checkpoint"), "n_generate": 40},
         ("report.json",)),
    ]
    mismatched, codes = [], []
    for i, (command, name, cfg, files) in enumerate(commands):
        path = tmp_path / f"c{i}.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / f"r{i}"
        argv = [command, "--preset", name, "--config", str(path), "--out", str(out), "--seed", "5"]
        codes.append(main(argv))
        first = {f: (out / f).read_bytes() for f in files}
        codes.append(main(argv))
        mismatched += [f"{command}:{f}" for f in files if (out / f).read_bytes() != first[f]]
    ok = not mismatched and all(c == 0 for c in codes)
    verdict(9, "byte-identical reruns", ok,
            f"{len(commands)} commands x 2 runs, exit codes {sorted(set(codes))}, "
            f"mismatched files: {mismatched or 'none'}")


# -- 10: top-k simplex ------------------------------------------------------------------
def test_criterion_10_topk(verdict):
    t0 = time.perf_counter()
    gen = np.random.default_rng(10)
    worst_sum, worst_oracle = 0.0, 0.0
    for _ in range(1000):
        n = int(gen.integers(1, 12))
        k = int(gen.integers(1, n + 1))
        logits = gen.normal(size=n) * gen.uniform(0.1, 5)
        if gen.uniform() < 0.2:
            logits = np.round(logits)  # exercise ties
        p = np.exp(logits - logits.max())
        p /= p.sum()
        idx, w = topk_renormalize(p, k)
        assert np.all(w >= 0)
        worst_sum = max(worst_sum, abs(float(w.sum()) - 1))
        ranked = sorted(range(n), key=lambda i: (-p[i], i))[:k]
        assert list(idx) == ranked
        oracle = np.array([p[i] for i in ranked]) / sum(p[i] for i in ranked)
        worst_oracle = max(worst_oracle, float(np.abs(w - oracle).max()))
    dt = time.perf_counter() - t0
    ok = worst_sum < 1e-12 and worst_oracle < 1e-12 and dt < 5
    verdict(10, "top-k simplex", ok,
            f"1000 vectors: weights >= 0, |sum-1| max {worst_sum:.1e} < 1e-12, "
            f"oracle max diff {worst_oracle:.1e}, {dt:.2f}s < 5s")
