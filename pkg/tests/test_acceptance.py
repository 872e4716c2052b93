"""Acceptance suite: one test per primary criterion, each timed against its budget.

Run directly (``python tests/test_acceptance.py``) or through pytest; the terminal
summary prints one PASS/FAIL line per criterion.
"""

import math
import sys
from datetime import datetime, timedelta

import numpy as np
import pytest
import torch

from conftest import criterion
from talon import bench, sam
from talon.backbone import backbone_hash
from talon.complexity import complexity_vector
from talon.config import ModelConfig
from talon.forecaster import TalonModel, autoregressive_forecast, forward_train, prepare, train
from talon.hte import HeterogeneousEncoder
from talon.numerics import Rng, grad_check, param_groups
from talon.series import MultivariateSeries, RegimeSpec, SynthSpec, chronological_split, make_windows, synth_generate


def test_criterion_01_complexity_oracle():
    with criterion(1, 1.0) as info:
        const = complexity_vector(np.full(96, 3.7)).as_array()
        assert np.allclose(const, [0.0, 0.2689, 0.0], atol=1e-3)
        ramp = complexity_vector(0.1 * np.arange(96) + 2.0)
        assert ramp.trend_strength >= 0.99 and ramp.autocorr >= 1 - 1e-6
        info.update(constant=np.round(const, 4).tolist(), ramp_c1=round(ramp.trend_strength, 6))


def test_criterion_02_gate_properties():
    with criterion(2, 10.0) as info:
        n_routings, enc_count, rows = 10_000, 50, 200
        subsets = [("Linear", "CNN", "LSTM"), ("Linear", "CNN"), ("CNN", "LSTM"), ("Linear", "LSTM"), ("LSTM",)]
        for i in range(enc_count):
            r = Rng(i, "fuzz")
            k = 1 + i % 3
            enc = HeterogeneousEncoder(12, 6, k, r.child("enc"), subsets[i % len(subsets)]).double()
            s = torch.from_numpy(r.normal((rows, 12)) * (1 + i))
            c = torch.from_numpy(r.uniform((rows, 3)))
            eps = torch.from_numpy(r.normal((rows, 3)))
            gates, _ = enc.route(s, c, eps)
            assert bool((gates >= 0).all())
            assert float((gates.detach().sum(1) - 1).abs().max()) <= 1e-6
            assert int((gates > 0).sum(1).max()) <= k
            zero = torch.zeros(rows, 3, dtype=torch.float64)
            assert torch.equal(enc.route(s, c, zero)[0], enc.route(s, c, zero)[0])
            assert torch.equal(enc.route(s, c, zero)[0], enc.route(s, c)[0])
        assert enc_count * rows == n_routings
        info.update(routings=n_routings)


def test_criterion_03_freeze_contract(regime_series):
    with criterion(3, 120.0) as info:
        series, _ = regime_series
        cfg = ModelConfig(L=48, S=16, period=8, d=16, n_layers=2, n_heads=2, max_positions=16, epochs=1000, batch=8, max_steps=500, seed=42)
        before = backbone_hash(TalonModel(cfg).backbone)
        result = train(cfg, make_windows(series, cfg.L, cfg.S, stride=4))
        after = backbone_hash(result.model.backbone)
        assert result.steps == 500 and before == after
        info.update(steps=result.steps, sha256=after[:12])


def test_criterion_04_gradient_fidelity():
    with criterion(4, 120.0) as info:
        cfg = ModelConfig(L=12, S=4, period=2, d=8, k=2, n_layers=1, n_heads=2, max_positions=64, seed=42)
        assert (cfg.d, cfg.S, cfg.N, len(cfg.experts), cfg.k, cfg.n_layers) == (8, 4, 3, 3, 2, 1)
        model = TalonModel(cfg).double()
        t = np.arange(80)[:, None]
        series = MultivariateSeries.from_array(np.sin(t / 3.0) + 0.3 * Rng(0, "x").normal((80, 1)))
        data = prepare(model, make_windows(series, cfg.L, cfg.S, stride=9)[:3])
        eps = torch.from_numpy(Rng(0, "fixed-noise").normal(tuple(data.patches.shape[:2]) + (3,)))
        groups = param_groups(model)
        n_scalars = sum(g.tensor.numel() for g in groups if g.trainable)
        err = grad_check(lambda: forward_train(model, data, eps).total, groups)
        assert err <= 1e-4
        info.update(max_rel_err=f"{err:.2e}", trainable_scalars=n_scalars)


def test_criterion_05_overfit_smoke():
    with criterion(5, 300.0) as info:
        spec = SynthSpec([RegimeSpec("sinusoid", 200, {"period": 8.0, "noise": 0.0})], 400, 1)
        series, _ = synth_generate(spec, 42)
        windows = make_windows(series, 48, 16, stride=20)[:8]
        assert len(windows) == 8
        cfg = ModelConfig(L=48, S=16, period=8, d=32, n_layers=1, n_heads=4, max_positions=32, epochs=2000, batch=8, max_steps=2000, lr=3e-3, seed=42)
        result = train(cfg, windows)
        final = result.curve[-1]["L_MSE"]
        assert result.steps <= 2000 and final < 1e-2
        info.update(steps=result.steps, final_L_MSE=f"{final:.2e}")


def _regime_corpus(seed=42, S=16):
    spec = SynthSpec(
        [
            RegimeSpec("linear-trend", 4 * S, {"slope": 0.05}),
            RegimeSpec("sinusoid", 4 * S, {"period": 4.0, "noise": 0.05}),
            RegimeSpec("ar1", 4 * S, {"rho": 0.98}),
        ],
        4 * S * 3 * 8,
        1,
    )
    return synth_generate(spec, seed)


def test_criterion_06_heterogeneous_routing():
    with criterion(6, 600.0) as info:
        series, labels = _regime_corpus()
        cfg = ModelConfig(L=64, S=16, period=4, d=32, n_layers=1, n_heads=4, epochs=10, batch=32, lr=3e-3, seed=42)
        result = bench.train_on_series(cfg, series, stride=8)
        hist = bench.expert_distribution(result.model, series, labels)
        regimes = sorted(hist.per_regime)
        majorities = [hist.majority(r) for r in regimes]
        max_tv = max(bench.total_variation(hist.per_regime[a], hist.per_regime[b]) for a in regimes for b in regimes)
        info.update(majorities=majorities, max_tv=round(max_tv, 3))
        assert len(regimes) == 3
        assert len(set(majorities)) >= 2
        assert max_tv >= 0.2


def test_criterion_07_alignment_effect():
    with criterion(7, 600.0) as info:
        spec = SynthSpec([RegimeSpec("linear-trend", 64), RegimeSpec("sinusoid", 64, {"period": 8.0}), RegimeSpec("ar1", 64)], 1200, 1)
        series, _ = synth_generate(spec, 42)
        windows = make_windows(series, 64, 16, stride=8)
        reports = {}
        for beta in (0.06, 0.0):
            cfg = ModelConfig(L=64, S=16, period=8, d=32, n_layers=2, n_heads=4, epochs=30, batch=16, lr=3e-3, seed=42, beta=beta)
            model = train(cfg, windows).model
            reports[beta] = bench.embedding_distance(model, series)
        aligned, plain = reports[0.06], reports[0.0]
        info.update(
            dist_beta=round(aligned.mean_l2, 4),
            dist_plain=round(plain.mean_l2, 4),
            diag_cos=round(aligned.mean_cosine, 4),
        )
        closer, cosine_ok = aligned.mean_l2 < plain.mean_l2, aligned.mean_cosine >= 0.5
        assert closer and cosine_ok, f"distance smaller: {closer}; diagonal cosine >= 0.5: {cosine_ok}"


def test_criterion_08_prompt_free_inference():
    with criterion(8, 1.0) as info:
        cfg = ModelConfig(L=48, S=16, period=8, d=16, n_layers=1, n_heads=2, max_positions=16, seed=42)
        model = TalonModel(cfg).eval()
        series = MultivariateSeries.from_array(np.sin(np.arange(120) / 4.0)[:, None])
        # the counters do move when prompts are built, so zero below is meaningful
        builds = sam.build_count
        prepare(model, make_windows(series, cfg.L, cfg.S, stride=16)[:2])
        assert sam.build_count > builds and model.backbone.prompt_calls > 0
        builds, calls = sam.build_count, model.backbone.prompt_calls
        autoregressive_forecast(model, series.values[:48, 0], 64)
        assert sam.build_count - builds == 0 and model.backbone.prompt_calls - calls == 0
        info.update(prompt_builds=sam.build_count - builds, prompt_calls=model.backbone.prompt_calls - calls)


def test_criterion_09_rolling_protocol():
    with criterion(9, 60.0) as info:
        cfg = ModelConfig(seed=42)
        assert (cfg.L, cfg.S) == (672, 96)
        model = TalonModel(cfg).eval()
        series, _ = synth_generate(SynthSpec([RegimeSpec("sinusoid", 400), RegimeSpec("ar1", 400)], 672, 1), 7)
        x = series.values[:, 0]
        h192 = autoregressive_forecast(model, x, 192)
        first = autoregressive_forecast(model, x, 96)
        second = autoregressive_forecast(model, np.concatenate([x[96:], first]), 96)
        assert np.array_equal(h192, np.concatenate([first, second]))
        full = autoregressive_forecast(model, x, 720)
        for h in (96, 192, 336):
            assert np.array_equal(autoregressive_forecast(model, x, h), full[:h])
        info.update(horizons=[96, 192, 336, 720], max_abs=round(float(np.abs(full).max()), 3))


def test_criterion_10_metric_formulas():
    with criterion(10, 1.0) as info:
        pair = (bench.mse([1, 2, 3], [2, 2, 2]), bench.mae([1, 2, 3], [2, 2, 2]))
        assert pair == (pytest.approx(0.6667, abs=1e-4), pytest.approx(0.6667, abs=1e-4))
        assert bench.imp({"x": 0.4}, {"x": 0.386}).percent == pytest.approx(3.5, abs=0.01)
        datasets = ["ETTh1", "ETTh2", "ETTm1", "ETTm2", "Weather", "ECL", "Traffic"]
        talon = dict(zip(datasets, [0.386, 0.355, 0.345, 0.259, 0.239, 0.162, 0.373]))
        timesnet = dict(zip(datasets, [0.495, 0.455, 0.505, 0.293, 0.260, 0.207, 0.619]))
        pct = bench.imp(timesnet, talon).percent
        assert abs(pct - 22.0) <= 1.0
        info.update(mse_mae=[round(v, 4) for v in pair], table_imp=f"{pct:.2f}%")


def test_criterion_11_split_fidelity():
    with criterion(11, 1.0) as info:
        n = 17420  # hourly rows of ETTh1
        values = np.random.default_rng(0).normal(size=(n, 7))
        t0 = datetime(2016, 7, 1)
        stamps = tuple((t0 + timedelta(hours=i)).isoformat(sep=" ") for i in range(n))
        series = MultivariateSeries(stamps, values, ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"))
        parts = chronological_split(series, counts=(8545, 2881, 2881))
        lengths = tuple(p.length for p in parts)
        assert lengths == (8545, 2881, 2881)
        assert parts[1].timestamps[0] == stamps[8545] and parts[2].timestamps[-1] == stamps[8545 + 2881 + 2881 - 1]
        info.update(splits=lengths)


ABLATION_VARIANTS = [
    (),
    ("w/o-hte",),
    ("w/o-hte-r",),
    ("w/o-sam",),
    ("w/o-prompt",),
    ("w/o-llm",),
    ("w/o-linear",),
    ("w/o-cnn",),
    ("w/o-lstm",),
]


def test_criterion_12_ablation_harness(tmp_path):
    with criterion(12, 1800.0) as info:
        series, _ = _regime_corpus()
        train_s, val_s, test_s = chronological_split(series, fractions=(0.6, 0.2, 0.2))
        cfg = ModelConfig(L=64, S=16, period=4, d=16, n_layers=1, n_heads=2, epochs=2, batch=16, lr=3e-3, seed=42)
        rows = bench.ablate(cfg, ABLATION_VARIANTS, train_s, val_s, test_s, [16], "synthetic", stride=8)
        variants = [bench.variant_name(v) for v in ABLATION_VARIANTS]
        assert [r.variant for r in rows] == variants  # one row per variant
        assert all(math.isfinite(r.mse) and math.isfinite(r.mae) for r in rows)
        jl, _ = bench.write_reports(rows, tmp_path, "ablation", cfg.to_dict(), build="test")
        assert len(jl.read_text().splitlines()) == len(rows)
        info.update(variants=len(variants), rows=len(rows))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
