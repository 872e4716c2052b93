"""Series data model, CSV ingestion, chronological splits, windowing, patching, synthetic corpora."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng

STD_FLOOR = 1e-5


class SeriesError(ValueError):
    pass


@dataclass(frozen=True)
class MultivariateSeries:
    timestamps: tuple  # ISO strings or ints, strictly increasing
    values: np.ndarray  # (T, C)
    channel_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[1] < 1:
            raise SeriesError("values must be a T x C matrix with C >= 1")
        if len(self.timestamps) != values.shape[0]:
            raise SeriesError("timestamp count does not match row count")
        if len(self.channel_names) != values.shape[1]:
            raise SeriesError("channel name count does not match column count")
        _check_monotone(self.timestamps)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "MultivariateSeries":
        return MultivariateSeries(self.timestamps[start:stop], self.values[start:stop], self.channel_names)

    @classmethod
    def from_array(cls, values, channel_names: Sequence[str] | None = None) -> "MultivariateSeries":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        names = tuple(channel_names) if channel_names else tuple(f"ch{i}" for i in range(values.shape[1]))
        return cls(tuple(range(values.shape[0])), values, names)


def _timestamp_key(ts):
    if isinstance(ts, (int, np.integer)):
        return int(ts)
    return datetime.fromisoformat(str(ts))


def _check_monotone(timestamps) -> None:
    keys = [_timestamp_key(t) for t in timestamps]
    for a, b in zip(keys, keys[1:]):
        if not a < b:
            raise SeriesError("timestamps must be strictly increasing")


# --------------------------------------------------------------------------- CSV


@dataclass
class CsvSchema:
    date_column: str | None = "date"
    value_columns: list[str] | None = None  # None = every non-date column


def _parse_timestamp(cell: str):
    cell = cell.strip()
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        datetime.fromisoformat(cell)
    except ValueError as exc:
        raise SeriesError(f"unparseable timestamp {cell!r}") from exc
    return cell


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> MultivariateSeries:
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SeriesError("no rows") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if not rows:
        raise SeriesError("no rows")

    date_idx = None
    if schema.date_column is not None:
        if schema.date_column not in header:
            raise SeriesError(f"missing column {schema.date_column!r}")
        date_idx = header.index(schema.date_column)
    if schema.value_columns is None:
        value_names = [h for i, h in enumerate(header) if i != date_idx]
    else:
        value_names = list(schema.value_columns)
    for name in value_names:
        if name not in header:
            raise SeriesError(f"missing column {name!r}")
    value_idx = [header.index(n) for n in value_names]

    values = np.empty((len(rows), len(value_idx)), dtype=np.float64)
    timestamps = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SeriesError(f"row {r + 2} has {len(row)} cells, expected {len(header)}")
        for c, idx in enumerate(value_idx):
            try:
                values[r, c] = float(row[idx])
            except ValueError:
                raise SeriesError(f"unparseable cell {row[idx]!r} at row {r + 2}, column {header[idx]!r}") from None
        timestamps.append(_parse_timestamp(row[date_idx]) if date_idx is not None else r)
    return MultivariateSeries(tuple(timestamps), values, tuple(value_names))


def write_csv(series: MultivariateSeries, path: str | Path, date_column: str = "date") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([date_column, *series.channel_names])
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([ts, *(repr(float(v)) for v in row)])


# ------------------------------------------------------------------------- splits


def chronological_split(
    series: MultivariateSeries,
    counts: Sequence[int] | None = None,
    fractions: Sequence[float] | None = None,
) -> tuple[MultivariateSeries, MultivariateSeries, MultivariateSeries]:
    """Contiguous train/val/test prefixes in time order. Explicit counts win over fractions."""
    T = series.length
    if counts is None:
        if fractions is None:
            raise SeriesError("either counts or fractions are required")
        n_train = int(T * fractions[0])
        n_val = int(T * fractions[1])
        counts = (n_train, n_val, T - n_train - n_val)
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 1:
        raise SeriesError("split counts must all be >= 1")
    if n_train + n_val + n_test > T:
        raise SeriesError(f"split counts {tuple(counts)} exceed series length {T}")
    a, b = n_train, n_train + n_val
    return series.slice(0, a), series.slice(a, b), series.slice(b, b + n_test)


# ------------------------------------------------------------------------ windows


@dataclass(frozen=True)
class Window:
    lookback: np.ndarray  # (L,)
    target: np.ndarray  # (H,)
    channel: int
    start: int
    timestamps: tuple = field(repr=False)  # lookback followed by target span
    norm_stats: tuple[float, float] = (0.0, 1.0)

    @property
    def L(self) -> int:
        return self.lookback.shape[0]


def make_windows(series: MultivariateSeries, L: int, H: int, stride: int = 1, S: int | None = None) -> list[Window]:
    T = series.length
    if stride < 1:
        raise SeriesError("stride must be >= 1")
    if L + H > T:
        raise SeriesError(f"L + H = {L + H} exceeds series length {T}")
    if S is not None and L % S:
        raise SeriesError(f"lookback {L} not divisible by patch length {S}")
    out = []
    for ch in range(series.n_channels):
        col = series.values[:, ch]
        for start in range(0, T - L - H + 1, stride):
            lookback = col[start : start + L].copy()
            out.append(
                Window(
                    lookback=lookback,
                    target=col[start + L : start + L + H].copy(),
                    channel=ch,
                    start=start,
                    timestamps=series.timestamps[start : start + L + H],
                    norm_stats=lookback_stats(lookback),
                )
            )
    return out


@dataclass(frozen=True)
class PatchMeta:
    index: int  # 1-based
    token_len: int
    patch_start: object
    patch_end: object
    x_start: object
    x_end: object
    seq_len: int


def segment(lookback: np.ndarray, S: int, timestamps: Sequence | None = None) -> tuple[np.ndarray, list[PatchMeta]]:
    """Split a length-L sequence into N = L/S non-overlapping patches, shape (N, S)."""
    lookback = np.asarray(lookback)
    L = lookback.shape[0]
    if S < 1 or L % S:
        raise SeriesError(f"patch length {S} does not divide sequence length {L}")
    if timestamps is None:
        timestamps = tuple(range(L))
    N = L // S
    metas = [
        PatchMeta(
            index=i + 1,
            token_len=S,
            patch_start=timestamps[i * S],
            patch_end=timestamps[(i + 1) * S - 1],
            x_start=timestamps[0],
            x_end=timestamps[-1],
            seq_len=L,
        )
        for i in range(N)
    ]
    return lookback.reshape(N, S), metas


# ----------------------------------------------------------------- normalization


def lookback_stats(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise SeriesError("standardization needs at least 2 values")
    return float(x.mean()), max(float(x.std()), STD_FLOOR)


def standardize(x: np.ndarray, stats: tuple[float, float] | None = None):
    """Instance standardization with lookback statistics; returns (normalized, (mean, std))."""
    stats = stats or lookback_stats(x)
    mean, std = stats
    return (np.asarray(x, dtype=np.float64) - mean) / std, stats


def destandardize(x, stats: tuple[float, float]):
    mean, std = stats
    return np.asarray(x, dtype=np.float64) * std + mean


# --------------------------------------------------------------------- synthetic

REGIMES = ("linear-trend", "sinusoid", "ar1", "noise-burst")


@dataclass
class RegimeSpec:
    name: str
    block: int  # steps per contiguous block
    params: dict = field(default_factory=dict)


@dataclass
class SynthSpec:
    regimes: list[RegimeSpec]
    length: int
    channels: int = 1


def _gen_block(rng: Rng, regime: RegimeSpec, n: int, last: float) -> np.ndarray:
    p = regime.params
    t = np.arange(n, dtype=np.float64)
    if regime.name == "linear-trend":
        slope = p.get("slope", 0.05) * (0.5 + float(rng.uniform(())))
        return last + slope * (t + 1)
    if regime.name == "sinusoid":
        period = p.get("period", 8.0)
        phase = 2 * np.pi * float(rng.uniform(()))
        amp = p.get("amplitude", 1.0)
        return amp * np.sin(2 * np.pi * t / period + phase) + p.get("noise", 0.1) * rng.normal((n,))
    if regime.name == "ar1":
        rho = p.get("rho", 0.95)
        eps = rng.normal((n,)) * p.get("sigma", 0.3)
        out = np.empty(n)
        prev = 0.0
        for i in range(n):
            prev = rho * prev + eps[i]
            out[i] = prev
        return out
    if regime.name == "noise-burst":
        return p.get("scale", 1.0) * rng.normal((n,))
    raise SeriesError(f"unknown regime {regime.name!r}")


def synth_generate(spec: SynthSpec, seed: int) -> tuple[MultivariateSeries, np.ndarray]:
    """Generate a corpus cycling through regime blocks. Returns (series, regime labels per step)."""
    for r in spec.regimes:
        if r.name not in REGIMES:
            raise SeriesError(f"unknown regime {r.name!r}")
    if not spec.regimes:
        raise SeriesError("synthetic spec needs at least one regime")
    labels = np.empty(spec.length, dtype=np.int64)
    values = np.empty((spec.length, spec.channels))
    for ch in range(spec.channels):
        rng = Rng(seed, f"synth/ch{ch}")
        pos, k, last = 0, 0, 0.0
        while pos < spec.length:
            regime = spec.regimes[k % len(spec.regimes)]
            n = min(regime.block, spec.length - pos)
            block = _gen_block(rng, regime, n, last)
            values[pos : pos + n, ch] = block
            labels[pos : pos + n] = k % len(spec.regimes)
            last = float(block[-1])
            pos += n
            k += 1
    names = tuple(f"ch{i}" for i in range(spec.channels))
    return MultivariateSeries(tuple(range(spec.length)), values, names), labels
