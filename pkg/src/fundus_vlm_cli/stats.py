"""Interval estimates and two-sided tests used by the evaluation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .errors import ContractError
from .utils import make_rng

UNDEFINED = "undefined"
DEFAULT_RESAMPLES = 10_000
_BOOTSTRAP_CHUNK = 1_000


@dataclass(frozen=True)
class WilsonInterval:
    point: float
    lower: float
    upper: float
    confidence: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class Interval:
    point: float
    lower: float
    upper: float
    confidence: float
    n: int


@dataclass(frozen=True)
class Rate:
    """k successes out of n; ``value`` and ``interval`` are None when n == 0."""

    k: int
    n: int
    value: Optional[float]
    interval: Optional[WilsonInterval]

    @property
    def defined(self) -> bool:
        return self.value is not None

    def display(self) -> str:
        if self.value is None or self.interval is None:
            return f"{UNDEFINED} ({self.k}/{self.n})"
        return f"{self.value:.4f} [{self.interval.lower:.4f}, {self.interval.upper:.4f}] ({self.k}/{self.n})"


def _z(confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise ContractError(f"confidence must lie in (0, 1), got {confidence}")
    return float(sps.norm.ppf(1.0 - (1.0 - confidence) / 2.0))


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> WilsonInterval:
    if n < 1:
        raise ContractError("wilson_interval needs n >= 1")
    if not 0 <= successes <= n:
        raise ContractError(f"successes {successes} outside [0, {n}]")
    z = _z(confidence)
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1.0 - p) / n + z2 / (4 * n * n))
    lower = 0.0 if successes == 0 else max(0.0, center - half)
    upper = 1.0 if successes == n else min(1.0, center + half)
    return WilsonInterval(point=p, lower=min(lower, p), upper=max(upper, p), confidence=confidence)


def rate(successes: int, n: int, confidence: float = 0.95) -> Rate:
    if n == 0:
        return Rate(k=successes, n=0, value=None, interval=None)
    interval = wilson_interval(successes, n, confidence)
    return Rate(k=successes, n=n, value=interval.point, interval=interval)


def bootstrap_ci(
    values: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    confidence: float = 0.95,
    seed: int = 0,
) -> Interval:
    """Percentile bootstrap of the mean."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ContractError("bootstrap_ci needs at least one value")
    if resamples < 1:
        raise ContractError("bootstrap_ci needs resamples >= 1")
    _z(confidence)
    point = float(data.mean())
    if np.ptp(data) == 0.0:
        c = float(data[0])
        return Interval(point=c, lower=c, upper=c, confidence=confidence, n=int(data.size))
    rng = make_rng(seed)
    means = np.empty(resamples)
    for start in range(0, resamples, _BOOTSTRAP_CHUNK):
        stop = min(start + _BOOTSTRAP_CHUNK, resamples)
        idx = rng.integers(0, data.size, size=(stop - start, data.size))
        means[start:stop] = data[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    lower, upper = np.quantile(means, [alpha, 1.0 - alpha])
    return Interval(point=point, lower=float(lower), upper=float(upper), confidence=confidence, n=int(data.size))


def bootstrap_reduction_ci(
    before: Sequence[float],
    after: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    confidence: float = 0.95,
    seed: int = 0,
) -> Interval:
    """
    Paired percentile bootstrap of (mean(before) - mean(after)) / mean(before).
    Resamples whose ``before`` mean is 0 are dropped.
    """
    x = np.asarray(before, dtype=np.float64)
    y = np.asarray(after, dtype=np.float64)
    if x.size == 0 or x.shape != y.shape:
        raise ContractError(f"bootstrap_reduction_ci needs paired non-empty samples, got {x.size} and {y.size}")
    if resamples < 1:
        raise ContractError("bootstrap_reduction_ci needs resamples >= 1")
    _z(confidence)
    base = float(x.mean())
    if base == 0.0:
        raise ContractError("bootstrap_reduction_ci needs a non-zero mean of before")
    point = (base - float(y.mean())) / base
    rng = make_rng(seed)
    reductions = np.empty(resamples)
    for start in range(0, resamples, _BOOTSTRAP_CHUNK):
        stop = min(start + _BOOTSTRAP_CHUNK, resamples)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        mx = x[idx].mean(axis=1)
        my = y[idx].mean(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            reductions[start:stop] = np.where(mx != 0.0, (mx - my) / mx, np.nan)
    alpha = (1.0 - confidence) / 2.0
    lower, upper = np.nanquantile(reductions, [alpha, 1.0 - alpha])
    return Interval(point=point, lower=float(lower), upper=float(upper), confidence=confidence, n=int(x.size))


def t_test_two_sided(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Welch two-sample t-test with Welch-Satterthwaite degrees of freedom.
    Both samples constant: p = 1 for equal means, 0 otherwise.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ContractError("t_test_two_sided needs at least two values per sample")
    va = x.var(ddof=1) / x.size
    vb = y.var(ddof=1) / y.size
    diff = float(x.mean() - y.mean())
    if va + vb == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (x.size - 1) + vb**2 / (y.size - 1))
    return float(min(1.0, 2.0 * sps.t.sf(abs(t), df)))


def welch_statistic(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """(t, df) of the Welch test, for reporting."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    va = x.var(ddof=1) / x.size
    vb = y.var(ddof=1) / y.size
    if va + vb == 0.0:
        raise ContractError("Welch statistic is undefined for two constant samples")
    t = float((x.mean() - y.mean()) / math.sqrt(va + vb))
    df = float((va + vb) ** 2 / (va**2 / (x.size - 1) + vb**2 / (y.size - 1)))
    return t, df


def _wilson_se(k: int, n: int, confidence: float) -> float:
    interval = wilson_interval(k, n, confidence)
    return interval.width / (2.0 * _z(confidence))


def proportion_test(k1: int, n1: int, k2: int, n2: int, confidence: float = 0.95) -> float:
    """Two-sided z-style test on k1/n1 vs k2/n2 with Wilson-derived standard errors."""
    if n1 < 1 or n2 < 1:
        raise ContractError("proportion_test needs n1, n2 >= 1")
    diff = k1 / n1 - k2 / n2
    se = math.sqrt(_wilson_se(k1, n1, confidence) ** 2 + _wilson_se(k2, n2, confidence) ** 2)
    if se == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    return float(min(1.0, 2.0 * sps.norm.sf(abs(diff) / se)))
