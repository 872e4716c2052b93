"""Per-patch complexity descriptor: trend strength, local variation, lag-1 autocorrelation.

Trend strength uses a classical additive decomposition (centered moving-average trend,
per-phase seasonal means) rather than iterated Loess; at patch scale the two agree on the
quantities that matter and this version is exact and easy to audit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PERIOD = 24
CORR_GUARD = 1e-12


@dataclass(frozen=True)
class ComplexityVector:
    trend_strength: float
    local_variation: float
    autocorr: float

    def as_array(self) -> np.ndarray:
        return np.array([self.trend_strength, self.local_variation, self.autocorr])

    def __iter__(self):
        return iter((self.trend_strength, self.local_variation, self.autocorr))


@dataclass(frozen=True)
class Decomposition:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int


def _moving_average_trend(s: np.ndarray, period: int) -> tuple[np.ndarray, np.ndarray]:
    """Centered MA of span ``period`` (2 x period for even periods), symmetric truncation at the edges.

    Returns the trend and a mask of positions where the full window was available.
    """
    S = s.shape[0]
    half = period // 2
    if period % 2:
        weights = np.full(period, 1.0 / period)
    else:
        weights = np.full(period + 1, 1.0 / period)
        weights[0] = weights[-1] = 0.5 / period
    trend = np.empty(S)
    full = np.zeros(S, dtype=bool)
    for t in range(S):
        h = min(half, t, S - 1 - t)
        if h == half:
            trend[t] = float(np.dot(weights, s[t - half : t + half + 1]))
            full[t] = True
        else:
            trend[t] = float(s[t - h : t + h + 1].mean())
    return trend, full


def decompose(s, period: int = DEFAULT_PERIOD) -> Decomposition:
    s = np.asarray(s, dtype=np.float64)
    if period < 1:
        raise ValueError("period must be >= 1")
    if s.shape[0] < 3:
        raise ValueError("decomposition needs at least 3 points")
    S = s.shape[0]
    trend, full = _moving_average_trend(s, period)
    detrended = s - trend
    seasonal = np.zeros(S)
    if S >= 2 * period and period > 1:
        phase = np.arange(S) % period
        use = full if all(full[phase == j].any() for j in range(period)) else np.ones(S, dtype=bool)
        means = np.array([detrended[(phase == j) & use].mean() for j in range(period)])
        means -= means.mean()
        seasonal = means[phase]
    residual = s - trend - seasonal
    return Decomposition(trend, seasonal, residual, period)


def trend_strength(s, period: int = DEFAULT_PERIOD) -> float:
    s = np.asarray(s, dtype=np.float64)
    d = decompose(s, period)
    deseason = s - d.seasonal
    var_d = float(np.var(deseason))
    if var_d == 0.0 or var_d <= 1e-12 * float(np.mean(deseason**2)):
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - np.var(d.residual) / var_d)))


def local_variation(s) -> float:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("local variation needs at least 2 points")
    x = np.log1p(np.std(np.diff(s))) - 1.0
    return float(1.0 / (1.0 + np.exp(-x)))


def autocorr1(s) -> float:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] < 3:
        raise ValueError("autocorrelation needs at least 3 points")
    if not np.isfinite(s).all():
        return 0.0
    a = s[:-1] - s[:-1].mean()
    b = s[1:] - s[1:].mean()
    va, vb = float(np.mean(a * a)), float(np.mean(b * b))
    if va < CORR_GUARD or vb < CORR_GUARD:
        return 0.0
    r = float(np.mean(a * b)) / np.sqrt(va * vb)
    return float(min(1.0, abs(r))) if np.isfinite(r) else 0.0


def complexity_vector(s, period: int = DEFAULT_PERIOD) -> ComplexityVector:
    return ComplexityVector(trend_strength(s, period), local_variation(s), autocorr1(s))


def complexity_matrix(patches: np.ndarray, period: int = DEFAULT_PERIOD) -> np.ndarray:
    """Vectorized complexity vectors for a stack of patches (..., S) -> (..., 3)."""
    patches = np.asarray(patches, dtype=np.float64)
    lead = patches.shape[:-1]
    x = patches.reshape(-1, patches.shape[-1])
    n, S = x.shape
    if S < 3:
        raise ValueError("complexity needs at least 3 points per patch")
    if period < 1:
        raise ValueError("period must be >= 1")

    # trend: same centered MA / symmetric truncation as decompose()
    half = period // 2
    if period % 2:
        weights = np.full(period, 1.0 / period)
    else:
        weights = np.full(period + 1, 1.0 / period)
        weights[0] = weights[-1] = 0.5 / period
    trend = np.empty_like(x)
    full = np.zeros(S, dtype=bool)
    for t in range(S):
        h = min(half, t, S - 1 - t)
        if h == half:
            trend[:, t] = x[:, t - half : t + half + 1] @ weights
            full[t] = True
        else:
            trend[:, t] = x[:, t - h : t + h + 1].mean(1)
    seasonal = np.zeros_like(x)
    if S >= 2 * period and period > 1:
        phase = np.arange(S) % period
        use = full if all(full[phase == j].any() for j in range(period)) else np.ones(S, dtype=bool)
        detrended = x - trend
        means = np.stack([detrended[:, (phase == j) & use].mean(1) for j in range(period)], axis=1)
        means -= means.mean(1, keepdims=True)
        seasonal = means[:, phase]
    residual = x - trend - seasonal
    deseason = x - seasonal
    var_d = deseason.var(1)
    degenerate = (var_d == 0.0) | (var_d <= 1e-12 * (deseason**2).mean(1))
    with np.errstate(divide="ignore", invalid="ignore"):
        c1 = np.clip(1.0 - residual.var(1) / var_d, 0.0, 1.0)
    c1 = np.where(degenerate, 0.0, c1)

    c2 = 1.0 / (1.0 + np.exp(-(np.log1p(np.diff(x, axis=1).std(1)) - 1.0)))

    a = x[:, :-1] - x[:, :-1].mean(1, keepdims=True)
    b = x[:, 1:] - x[:, 1:].mean(1, keepdims=True)
    va, vb = (a * a).mean(1), (b * b).mean(1)
    ok = (va >= CORR_GUARD) & (vb >= CORR_GUARD) & np.isfinite(x).all(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs((a * b).mean(1) / np.sqrt(va * vb))
    c3 = np.where(ok & np.isfinite(r), np.minimum(r, 1.0), 0.0)
    return np.stack([c1, c2, c3], axis=1).reshape(*lead, 3)
