"""Summary statistics, paired significance tests, effect sizes, violin data.

The Student-t survival function is computed from the regularized incomplete
beta function (continued fraction, Lentz's method) so results are identical
across platforms with no statistics-library dependency. The two-sided
p-value for t with nu degrees of freedom is I_{nu/(nu+t^2)}(nu/2, 1/2).

Cohen's d defaults to the pooled-variance variant; the paired variant
(mean of differences over their standard deviation) is selectable and the
chosen variant is recorded wherever a d value is reported.

Violin data is a Gaussian kernel density estimate on a 256-point support
spanning [min - 3h, max + 3h] with Silverman's bandwidth, renormalized so
the trapezoid integral is exactly 1. Quartiles use linear interpolation
between closest ranks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateStatisticsError

PRACTICAL_D = 0.2
SIGNIFICANT_P = 0.05
_D_VARIANTS = ("pooled", "paired")


class Summary(NamedTuple):
    mean: float
    median: float
    std: float
    n: int


class PairedTResult(NamedTuple):
    t_statistic: float
    p_value: float
    n: int
    degenerate: bool


def summary(scores) -> Summary:
    """Mean, median (midpoint rule), and sample standard deviation (n-1)."""
    x = np.asarray(list(scores), dtype=np.float64)
    if x.size == 0:
        raise ValueError("summary of an empty score list")
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return Summary(mean=float(np.mean(x)), median=float(np.median(x)),
                   std=std, n=int(x.size))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's method)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta failed to converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # continued fraction converges fast below the mean of the distribution
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {dof}")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


def paired_t_test(a, b) -> PairedTResult:
    """Two-sided paired t-test on per-pair differences a - b.

    Zero-variance differences are degenerate: identical samples give
    (t=0, p=1); a constant nonzero difference gives (t=+-inf, p=0).
    """
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    n = d.size
    sd = float(np.std(d, ddof=1))
    mean_d = float(np.mean(d))
    if sd == 0.0:
        if mean_d == 0.0:
            return PairedTResult(0.0, 1.0, n, True)
        return PairedTResult(math.copysign(math.inf, mean_d), 0.0, n, True)
    t = mean_d / (sd / math.sqrt(n))
    return PairedTResult(t, t_two_sided_p(t, n - 1), n, False)


def cohens_d(a, b, variant: str = "pooled") -> float:
    """Standardized mean difference between two samples.

    pooled: (mean a - mean b) / s_pooled with the (n-1)-weighted pooled
    standard deviation. paired: mean(a - b) / std(a - b). Zero denominator
    with equal means gives 0; with unequal means the value would be
    infinite and is rejected.
    """
    if variant not in _D_VARIANTS:
        raise ValueError(f"variant must be one of {_D_VARIANTS}, got {variant!r}")
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if variant == "paired":
        if a.shape != b.shape:
            raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
        if a.size < 2:
            raise ValueError("paired Cohen's d needs at least 2 pairs")
        d = a - b
        sd = float(np.std(d, ddof=1))
        if sd == 0.0:
            if float(np.mean(d)) == 0.0:
                return 0.0
            raise DegenerateStatisticsError(
                "constant nonzero paired differences: d is infinite")
        return float(np.mean(d)) / sd
    if a.size < 2 or b.size < 2:
        raise ValueError("pooled Cohen's d needs at least 2 values per sample")
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    pooled = ((a.size - 1) * va + (b.size - 1) * vb) / (a.size + b.size - 2)
    diff = float(np.mean(a)) - float(np.mean(b))
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0
        raise DegenerateStatisticsError("zero pooled variance with unequal means")
    return diff / math.sqrt(pooled)


@dataclass
class EffectSizeReport:
    """Paired comparison of two methods' score distributions."""

    method_a: str
    method_b: str
    n: int
    mean_a: float
    mean_b: float
    median_a: float
    median_b: float
    std_a: float
    std_b: float
    t_statistic: float
    p_value: float
    cohens_d: float
    d_variant: str
    practical: bool
    significant: bool
    degenerate: bool = False


def effect_size_report(method_a: str, method_b: str, a, b,
                       d_variant: str = "pooled") -> EffectSizeReport:
    """Full paired comparison: summaries, paired t, Cohen's d, thresholds."""
    sa = summary(a)
    sb = summary(b)
    t = paired_t_test(a, b)
    try:
        d = cohens_d(a, b, variant=d_variant)
        d_degenerate = False
    except DegenerateStatisticsError:
        d = math.inf if sa.mean > sb.mean else -math.inf
        d_degenerate = True
    return EffectSizeReport(
        method_a=method_a, method_b=method_b, n=t.n,
        mean_a=sa.mean, mean_b=sb.mean,
        median_a=sa.median, median_b=sb.median,
        std_a=sa.std, std_b=sb.std,
        t_statistic=t.t_statistic, p_value=t.p_value,
        cohens_d=d, d_variant=d_variant,
        practical=abs(d) > PRACTICAL_D,
        significant=t.p_value < SIGNIFICANT_P,
        degenerate=t.degenerate or d_degenerate,
    )


@dataclass
class ViolinData:
    """Kernel density estimate of a score distribution, for violin plots."""

    method: str
    kde_support: np.ndarray
    kde_density: np.ndarray
    quartiles: tuple


def silverman_bandwidth(x: np.ndarray) -> float:
    sigma = float(np.std(x, ddof=1))
    q1, q3 = np.percentile(x, [25.0, 75.0])
    iqr = float(q3 - q1)
    spreads = [s for s in (sigma, iqr / 1.34) if s > 0]
    if not spreads:
        # constant sample: fall back to a sliver so the KDE stays finite
        return max(abs(float(x[0])), 1.0) * 1e-6
    return 0.9 * min(spreads) * x.size ** (-0.2)


def violin(scores, bandwidth="auto", method: str = "") -> ViolinData:
    """Gaussian KDE on 256 support points, density renormalized to integrate to 1."""
    x = np.asarray(list(scores), dtype=np.float64)
    if x.size < 2:
        raise ValueError("violin data needs at least 2 scores")
    h = silverman_bandwidth(x) if bandwidth == "auto" else float(bandwidth)
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    support = np.linspace(x.min() - 3.0 * h, x.max() + 3.0 * h, 256)
    z = (support[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2.0 * math.pi))
    area = float(np.trapezoid(density, support))
    if area <= 0:
        raise DegenerateStatisticsError("violin density integrates to zero")
    density = density / area
    q1, q2, q3 = np.percentile(x, [25.0, 50.0, 75.0])
    return ViolinData(method=method, kde_support=support, kde_density=density,
                      quartiles=(float(q1), float(q2), float(q3)))
