"""Config resolution, data preparation and ablation plumbing."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chime import pipeline as P
from chime.metrics import MetricReport


def fewshot_cfg(**dataset):
    base = P.load_preset("fewshot-demo")
    base["dataset"].update(length=1200, **dataset)
    return P.resolve_config(base)


class TestResolveConfig:
    def test_schedule_length_follows_source(self):
        assert P.resolve_config({})["diffusion"]["T"] == 500
        cfg = P.resolve_config({"task": "forecast", "dataset": {"source": "regime-shift", "L": 96, "h": 96}})
        assert cfg["diffusion"]["T"] == 1000
        assert P.resolve_config({"diffusion": {"T": 77}})["diffusion"]["T"] == 77

    def test_defaults_filled(self):
        cfg = P.resolve_config({})
        assert cfg["diffusion"]["batch_size"] == 128
        assert cfg["multiscale"]["rates"] and cfg["multiscale"]["rates"][0] == 1

    def test_horizon_must_match_task(self):
        with pytest.raises(P.ConfigError, match="h >= 1"):
            P.resolve_config({"task": "forecast"})
        with pytest.raises(P.ConfigError, match="h = 0"):
            P.resolve_config({"dataset": {"h": 4}})

    @pytest.mark.parametrize("bad, where", [
        ({"dataset": {"bogus": 1}}, "dataset"),
        ({"diffusion": {"lr": -1.0}}, "diffusion"),
        ({"metrics": {"enabled": ["accuracy"]}}, "metrics"),
        ({"surprise": True}, "surprise"),
    ])
    def test_schema_rejects(self, bad, where):
        with pytest.raises(P.ConfigError, match=where):
            P.resolve_config(bad)

    def test_presets_validate(self):
        assert P.list_presets() == ["fewshot-demo", "sines-smoke"]
        smoke = P.resolve_config(P.load_preset("sines-smoke"))
        assert (smoke["dataset"]["L"], smoke["dataset"]["d"], smoke["dataset"]["n_windows"]) == (24, 5, 2000)
        assert (smoke["diffusion"]["batch_size"], smoke["diffusion"]["steps"], smoke["diffusion"]["T"]) == (
            32, 2000, 500)
        fs = P.resolve_config(P.load_preset("fewshot-demo"))
        assert fs["dataset"]["few_shot_frac"] == 0.2 and fs["dataset"]["h"] == 96
        assert fs["task"] == "forecast" and fs["hallucination"]["enabled"]

    def test_deep_merge_does_not_alias(self):
        base = {"a": {"b": [1]}}
        out = P.deep_merge(base, {"a": {"c": 2}})
        out["a"]["b"].append(9)
        assert base == {"a": {"b": [1]}} and out["a"]["c"] == 2


class TestHashes:
    def test_ignores_output_location(self):
        a = P.resolve_config({"output_dir": "x"})
        b = P.resolve_config({"output_dir": "y"})
        assert P.config_hash(a) == P.config_hash(b)
        assert P.config_hash(a) != P.config_hash(P.resolve_config({"seed": 1}))

    def test_training_key_ignores_evaluation(self):
        a = P.resolve_config({})
        b = P.deep_merge(a, {"metrics": {"n_repeats": 1}, "hallucination": {"target_granularity": "1day"}})
        assert P.training_key(a) == P.training_key(b)
        assert P.config_hash(a) != P.config_hash(b)
        c = P.deep_merge(a, {"multiscale": {"mode": "no-multiscale"}})
        assert P.training_key(a) != P.training_key(c)

    @settings(max_examples=30, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers(), max_size=6))
    def test_hash_ignores_key_order(self, d):
        assert P.config_hash(d) == P.config_hash(dict(reversed(list(d.items()))))


class TestAblations:
    def test_mapping(self):
        cfg = P.resolve_config({})
        assert P.apply_ablation(cfg, "full") == cfg
        assert P.apply_ablation(cfg, "no-multiscale")["multiscale"]["mode"] == "no-multiscale"
        assert P.apply_ablation(cfg, "average-weight")["multiscale"]["mode"] == "average-weight"
        assert not P.apply_ablation(cfg, "no-fh")["hallucination"]["enabled"]
        assert P.apply_ablation(cfg, "data-recon")["diffusion"]["paradigm"] == "data-reconstruction"
        assert P.apply_ablation(cfg, "attn-original")["diffusion"]["paradigm"] == "attn-original-condition"
        week = P.apply_ablation(cfg, "week")["hallucination"]
        assert week["enabled"] and week["target_granularity"] == "week"

    def test_unknown_name_lists_valid(self):
        with pytest.raises(P.ConfigError, match="no-multiscale"):
            P.apply_ablation(P.resolve_config({}), "magic")

    def test_config_diff(self):
        cfg = P.resolve_config({})
        assert P.config_diff(cfg, cfg) == []
        row = P.apply_ablation(cfg, "average-weight")
        assert P.config_diff(cfg, row) == ["multiscale.mode"]
        assert P.config_diff({"a": 1}, {"b": 1}) == ["a", "b"]

    def test_generation_rows_drop_hallucination(self):
        cfg = P.resolve_config({"hallucination": {"enabled": True}})
        assert not P.resolve_row(cfg, "full")["hallucination"]["enabled"]

    @staticmethod
    def fake_row(name, value):
        rep = MetricReport()
        rep.add("mse", [value, value + 0.2])
        return P.AblationRow(name, f"h{name}", [], rep, [])

    def test_variant_table(self):
        rows = [self.fake_row(n, i) for i, n in enumerate(["full", "no-multiscale", "average-weight", "no-fh"])]
        report, table = P.ablation_tables(rows)
        lines = table.splitlines()
        assert lines[0] == "variant,mse" and len(lines) == 5
        assert lines[2] == "no-multiscale," + repr(1.1)
        assert report["order"] == [r.name for r in rows]

    def test_granularity_sweep_is_one_column_each(self):
        rows = [self.fake_row(n, i) for i, n in enumerate(P.GRANULARITY_ABLATIONS)]
        _, table = P.ablation_tables(rows)
        header, body = table.splitlines()
        assert header.split(",") == ["metric", *P.GRANULARITY_ABLATIONS]
        assert len(header.split(",")) == 8 and body.startswith("mse,")


class TestPrepareData:
    def test_sines_shapes_and_range(self):
        cfg = P.resolve_config({"dataset": {"n_windows": 100}})
        data = P.prepare_data(cfg)
        assert data.train.shape[1:] == (24, 5) and data.test.shape[1:] == (24, 5)
        assert data.train.min() >= -1e-12 and data.train.max() <= 1 + 1e-12
        assert data.series == {} and data.target_history.shape == (0, 5)

    def test_deterministic(self):
        cfg = fewshot_cfg()
        a, b = P.prepare_data(cfg), P.prepare_data(cfg)
        assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)
        assert a.train_meta == b.train_meta

    def test_no_test_leakage(self):
        cfg = fewshot_cfg()
        data = P.prepare_data(cfg)
        span = cfg["dataset"]["L"] + cfg["dataset"]["h"]
        target_ends = [o + span for sid, o in data.train_meta if sid == 0]
        assert max(target_ends) <= data.test_start
        assert len(data.target_history) <= data.test_start
        assert len(data.series[0]) == len(data.target_history)

    def test_sources_use_their_own_ids(self):
        cfg = fewshot_cfg()
        data = P.prepare_data(cfg)
        ids = {sid for sid, _ in data.train_meta}
        assert ids == set(range(cfg["dataset"]["n_sources"] + 1))
        assert sorted(data.series) == sorted(ids)

    def test_few_shot_fraction_thins_target(self):
        full = P.prepare_data(fewshot_cfg(few_shot_frac=1.0))
        few = P.prepare_data(fewshot_cfg())
        n_full = sum(1 for sid, _ in full.train_meta if sid == 0)
        n_few = sum(1 for sid, _ in few.train_meta if sid == 0)
        assert n_few == pytest.approx(0.2 * n_full, abs=1)
        assert full.test_start == few.test_start and full.test.shape == few.test.shape

    def test_validation_windows_are_training_windows(self):
        data = P.prepare_data(fewshot_cfg())
        assert len(data.val) == 16
        train_set = {w.tobytes() for w in data.train}
        assert all(w.tobytes() in train_set for w in data.val)


def test_naive_forecast_repeats_last_value():
    look = np.arange(12.0).reshape(1, 6, 2)
    out = P.naive_forecast(look, 3)
    assert out.shape == (1, 3, 2) and np.all(out == look[:, -1:, :])


def test_stream_names_are_independent():
    a = P.stream(0, "init").normal((4,))
    b = P.stream(0, "noise").normal((4,))
    assert not np.allclose(a, b)
    assert np.array_equal(a, P.stream(0, "init").normal((4,)))
