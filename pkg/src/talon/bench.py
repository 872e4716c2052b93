"""Metrics, evaluation protocols, routing / embedding diagnostics and the ablation harness."""

from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .complexity import ComplexityVector, complexity_matrix
from .config import ConfigError, ModelConfig, SWITCHES
from .forecaster import TalonModel, TrainResult, autoregressive_forecast, train
from .hte import K, argmax_expert
from .series import MultivariateSeries, lookback_stats, make_windows, segment


class BenchError(ValueError):
    pass


# ----------------------------------------------------------------------- metrics


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise BenchError(f"length mismatch {y.shape[0]} vs {y_hat.shape[0]}")
    if y.size == 0:
        raise BenchError("empty prediction set")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


@dataclass
class ImpReport:
    per_dataset: dict[str, float]  # fractional reductions
    average: float

    @property
    def percent(self) -> float:
        return 100.0 * self.average


def imp(baseline: Mapping[str, float], ours: Mapping[str, float]) -> ImpReport:
    """Average relative error reduction of ``ours`` versus ``baseline`` over matching datasets."""
    if set(baseline) != set(ours):
        raise BenchError(f"dataset keys differ: {sorted(set(baseline) ^ set(ours))}")
    if not baseline:
        raise BenchError("no datasets")
    per = {}
    for key in baseline:
        base = float(baseline[key])
        if base <= 0:
            raise BenchError(f"zero baseline for {key!r}")
        per[key] = (base - float(ours[key])) / base
    return ImpReport(per, sum(per.values()) / len(per))


@dataclass
class MetricReport:
    dataset: str
    horizon: int
    mse: float
    mae: float
    n_predictions: int
    protocol: str
    variant: str = "base"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- evaluation


@dataclass
class RollingResult:
    reports: list[MetricReport]
    starts: np.ndarray  # window start indices (per channel)
    predictions: np.ndarray  # (C, n_windows, H_max), original units
    truth: dict[int, np.ndarray]  # H -> (C, n_windows_H, H)


def rolling_eval(
    model: TalonModel,
    series: MultivariateSeries,
    horizons: Sequence[int],
    dataset: str = "test",
    protocol: str = "one-for-all",
    chunk: int = 512,
) -> RollingResult:
    """Stride-1 rolling evaluation. Every window is decoded once to the longest horizon and
    each horizon's metrics use the prefix of that decode over the windows whose target fits."""
    horizons = sorted(set(int(h) for h in horizons))
    if not horizons or horizons[0] < 1:
        raise BenchError("horizons must be positive")
    L = model.config.L
    T = series.length
    h_min, h_max = horizons[0], horizons[-1]
    n_windows = T - L - h_min + 1
    if n_windows < 1:
        raise BenchError(f"horizon {h_min} unreachable: series of length {T} with lookback {L}")
    for h in horizons:
        if T - L - h + 1 < 1:
            raise BenchError(f"horizon {h} unreachable: series of length {T} with lookback {L}")
    starts = np.arange(n_windows)
    C = series.n_channels
    preds = np.empty((C, n_windows, h_max))
    for ch in range(C):
        col = series.values[:, ch]
        ctx = np.lib.stride_tricks.sliding_window_view(col, L)[:n_windows]
        for i in range(0, n_windows, chunk):
            preds[ch, i : i + chunk] = autoregressive_forecast(model, ctx[i : i + chunk], h_max)
    reports, truth = [], {}
    for h in horizons:
        n = T - L - h + 1
        y = np.stack(
            [np.lib.stride_tricks.sliding_window_view(series.values[L:, ch], h)[:n] for ch in range(C)]
        )
        y_hat = preds[:, :n, :h]
        truth[h] = y
        steps = -(-h // model.config.S)
        reports.append(
            MetricReport(
                dataset,
                h,
                mse(y, y_hat),
                mae(y, y_hat),
                int(y.size),
                protocol,
                extra={"windows_per_channel": n, "decode_steps": steps, "trimmed": steps * model.config.S - h},
            )
        )
    return RollingResult(reports, starts, preds, truth)


def zero_shot_eval(
    model: TalonModel, target: MultivariateSeries, horizons: Sequence[int], source: str, target_name: str
) -> RollingResult:
    """Source-trained model on an unseen target series, no updates."""
    return rolling_eval(model, target, horizons, dataset=f"{source}->{target_name}", protocol="zero-shot")


def train_on_series(
    config: ModelConfig,
    train_series: MultivariateSeries,
    val_series: MultivariateSeries | None = None,
    stride: int = 1,
    horizon: int | None = None,
) -> TrainResult:
    """Next-segment training on all channels. ``horizon`` only changes window bookkeeping."""
    H = horizon or config.S
    windows = make_windows(train_series, config.L, H, stride=stride, S=config.S)
    val = []
    if val_series is not None and val_series.length >= config.L + config.S:
        val = make_windows(val_series, config.L, config.S, stride=stride, S=config.S)
    return train(config, windows, val)


def one_for_one(
    config: ModelConfig,
    train_series: MultivariateSeries,
    val_series: MultivariateSeries | None,
    test_series: MultivariateSeries,
    horizons: Sequence[int],
    dataset: str = "test",
    stride: int = 1,
) -> list[MetricReport]:
    """A separate model per horizon, each evaluated at its own horizon only."""
    out = []
    for h in horizons:
        result = train_on_series(config, train_series, val_series, stride=stride, horizon=h)
        out.extend(rolling_eval(result.model, test_series, [h], dataset, protocol="one-for-one").reports)
    return out


# ------------------------------------------------------------------- diagnostics


def _lookback_windows(series: MultivariateSeries, L: int, S: int):
    """Non-overlapping L-length windows per channel; yields (channel, start, normalized (N, S))."""
    for ch in range(series.n_channels):
        col = series.values[:, ch]
        for start in range(0, series.length - L + 1, L):
            x = col[start : start + L]
            mean, std = lookback_stats(x)
            yield ch, start, ((x - mean) / std).reshape(L // S, S)


@dataclass
class ExpertHistogram:
    overall: list[float]
    counts: list[int]
    per_regime: dict[int, list[float]] = field(default_factory=dict)
    regime_counts: dict[int, int] = field(default_factory=dict)

    def majority(self, regime: int | None = None) -> int:
        hist = self.overall if regime is None else self.per_regime[regime]
        return int(np.argmax(hist))


def _normalize(counts: np.ndarray) -> list[float]:
    total = counts.sum()
    return (counts / total).tolist() if total else counts.astype(float).tolist()


@torch.no_grad()
def expert_distribution(
    model: TalonModel, series: MultivariateSeries, labels: np.ndarray | None = None
) -> ExpertHistogram:
    """Share of patches whose largest gate is each expert (ties to the lowest index).

    With ``labels`` (one regime id per time step) the histogram is also split by the
    majority regime of each patch."""
    cfg = model.config
    model.eval()
    wins = list(_lookback_windows(series, cfg.L, cfg.S))
    if not wins:
        raise BenchError("series shorter than one lookback window")
    patches = np.stack([w[2] for w in wins])
    comp = complexity_matrix(patches, cfg.period)
    _, gates, _ = model.encode(torch.from_numpy(patches).to(model.dtype), torch.from_numpy(comp).to(model.dtype))
    winners = argmax_expert(gates).reshape(-1)
    counts = np.bincount(winners, minlength=K)
    hist = ExpertHistogram(_normalize(counts), counts.tolist())
    if labels is not None:
        labels = np.asarray(labels)
        patch_labels = []
        for _, start, _ in wins:
            for i in range(cfg.N):
                seg = labels[start + i * cfg.S : start + (i + 1) * cfg.S]
                patch_labels.append(int(np.bincount(seg).argmax()))
        patch_labels = np.asarray(patch_labels)
        for r in np.unique(patch_labels):
            c = np.bincount(winners[patch_labels == r], minlength=K)
            hist.per_regime[int(r)] = _normalize(c)
            hist.regime_counts[int(r)] = int(c.sum())
    return hist


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass
class EmbeddingReport:
    mean_l2: float
    mean_cosine: float
    n_tokens: int
    distances: np.ndarray
    e: np.ndarray
    p: np.ndarray
    normalized: bool = False  # distances use raw embeddings


@torch.no_grad()
def embedding_distance(
    model: TalonModel,
    series: MultivariateSeries,
    max_windows: int | None = None,
    dump_path: str | Path | None = None,
) -> EmbeddingReport:
    """Raw L2 distance between temporal embeddings and their prompt embeddings (offline, training pathway)."""
    cfg = model.config
    model.eval()
    wins = list(_lookback_windows(series, cfg.L, cfg.S))[:max_windows]
    if not wins:
        raise BenchError("series shorter than one lookback window")
    E, P = [], []
    for ch, start, patches in wins:
        comp = complexity_matrix(patches, cfg.period)
        _, metas = segment(patches.reshape(-1), cfg.S, series.timestamps[start : start + cfg.L])
        cvs = [ComplexityVector(*map(float, c)) for c in comp]
        P.append(model.prompts.prompts_for_window(metas, cvs).double())
        e, _, _ = model.encode(
            torch.from_numpy(patches[None]).to(model.dtype), torch.from_numpy(comp[None]).to(model.dtype)
        )
        E.append(e[0].double())
    E, P = torch.cat(E), torch.cat(P)
    dist = (E - P).norm(dim=-1)
    cos = torch.nn.functional.cosine_similarity(E, P, dim=-1)
    report = EmbeddingReport(
        float(dist.mean()), float(cos.mean()), int(dist.numel()), dist.numpy(), E.numpy(), P.numpy()
    )
    if dump_path is not None:
        write_embedding_dump(report, dump_path)
    return report


def write_embedding_dump(report: EmbeddingReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = report.e.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["token_id", "l2", *(f"e{i}" for i in range(d)), *(f"p{i}" for i in range(d))])
        for i in range(report.n_tokens):
            w.writerow([i, repr(float(report.distances[i])), *map(repr, report.e[i].tolist()), *map(repr, report.p[i].tolist())])


# ---------------------------------------------------------------------- ablation


def variant_name(switches: Sequence[str]) -> str:
    return "+".join(switches) if switches else "base"


def ablate(
    config: ModelConfig,
    variants: Sequence[Sequence[str]],
    train_series: MultivariateSeries,
    val_series: MultivariateSeries | None,
    test_series: MultivariateSeries,
    horizons: Sequence[int],
    dataset: str = "test",
    stride: int = 1,
) -> list[MetricReport]:
    """Train and evaluate each switch combination under identical seed and data."""
    for switches in variants:
        for s in switches:
            if s not in SWITCHES:
                raise ConfigError(f"unknown switch {s!r}", {"switch": s})
    rows = []
    for switches in variants:
        cfg = config.with_switches(switches)
        result = train_on_series(cfg, train_series, val_series, stride=stride)
        for rep in rolling_eval(result.model, test_series, horizons, dataset).reports:
            rep.variant = variant_name(switches)
            rep.extra["final_L_MSE"] = result.curve[-1]["L_MSE"] if result.curve else None
            rows.append(rep)
    return rows


# ----------------------------------------------------------------------- reports


def build_id() -> str:
    """git-describe-style identifier of the source tree, with a version fallback."""
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"talon-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"talon-{__version__}"


def write_reports(
    reports: Sequence[MetricReport], out_dir: str | Path, name: str, run_config: dict, build: str | None = None
) -> tuple[Path, Path]:
    """JSON-lines (one record per report, with provenance) plus a CSV summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    build = build or build_id()
    jl, cs = out_dir / f"{name}.jsonl", out_dir / f"{name}.csv"
    with open(jl, "w", encoding="utf-8") as fh:
        for r in reports:
            rec = {**r.to_dict(), "run_config": run_config, "build": build}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(cs, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "dataset", "protocol", "horizon", "mse", "mae", "n_predictions"])
        for r in reports:
            w.writerow([r.variant, r.dataset, r.protocol, r.horizon, repr(r.mse), repr(r.mae), r.n_predictions])
    return jl, cs
