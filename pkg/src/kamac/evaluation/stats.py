"""Student-t significance tests built on the regularized incomplete beta function."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from statistics import fmean
from typing import Sequence

from ..errors import EmptyInputError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t >= 0 else tail


class TTestVariant(str, Enum):
    ONE_SAMPLE_VS_FIXED = "one_sample_vs_fixed"
    TWO_SAMPLE_POOLED = "two_sample_pooled"


@dataclass(frozen=True)
class TTestResult:
    mean_a: float
    std_a: float
    t_stat: float
    p_value: float
    df: int
    variant: TTestVariant
    mean_b: float | None = None
    std_b: float | None = None
    flags: tuple[str, ...] = field(default=())

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _sample_std(xs: Sequence[float], mean: float) -> float:
    return math.sqrt(sum((x - mean) ** 2 for x in xs) / (len(xs) - 1))


def _finish(diff: float, se: float) -> tuple[float, tuple[str, ...]]:
    if se > 0:
        return diff / se, ()
    if diff == 0:
        return 0.0, ("zero_variance",)
    return math.copysign(math.inf, diff), ("zero_variance",)


def t_test(samples: Sequence[float], baseline: float | Sequence[float]) -> TTestResult:
    """One-sample test against a fixed value, or pooled two-sample test.

    The one-sample statistic is ``(mean - baseline) * sqrt(n) / std`` with
    ``n - 1`` degrees of freedom; std always uses the ``n - 1`` denominator.
    """
    xs = [float(x) for x in samples]
    if len(xs) < 2:
        raise EmptyInputError("a t-test needs at least two samples")
    mean_a = fmean(xs)
    std_a = _sample_std(xs, mean_a)
    if isinstance(baseline, (int, float)):
        df = len(xs) - 1
        t, flags = _finish(mean_a - float(baseline), std_a / math.sqrt(len(xs)))
        return TTestResult(mean_a, std_a, t, t_two_sided_p(t, df), df, TTestVariant.ONE_SAMPLE_VS_FIXED, float(baseline), None, flags)
    ys = [float(y) for y in baseline]
    if len(ys) < 2:
        raise EmptyInputError("the pooled two-sample test needs at least two baseline samples")
    mean_b = fmean(ys)
    std_b = _sample_std(ys, mean_b)
    n1, n2 = len(xs), len(ys)
    df = n1 + n2 - 2
    pooled = ((n1 - 1) * std_a**2 + (n2 - 1) * std_b**2) / df
    t, flags = _finish(mean_a - mean_b, math.sqrt(pooled * (1.0 / n1 + 1.0 / n2)))
    return TTestResult(mean_a, std_a, t, t_two_sided_p(t, df), df, TTestVariant.TWO_SAMPLE_POOLED, mean_b, std_b, flags)
