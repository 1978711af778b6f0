import math

import mpmath
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kamac.errors import EmptyInputError
from kamac.evaluation import TTestVariant, betainc, significance_stars, t_cdf, t_test, t_two_sided_p
from reported_values import REPORTED_T_P

mpmath.mp.dps = 40


def quad_two_sided_p(t, df):
    """2 * integral of the Student-t density beyond |t|, by adaptive quadrature."""
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    density = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(2 * mpmath.quad(density, [abs(mpmath.mpf(t)), abs(mpmath.mpf(t)) + 10, mpmath.inf]))


GRID_T = [0.0, 0.05, 0.5, 1.0, 1.96, 2.5, 4.3, 6.92, 12.26, 30.07, 80.0]
GRID_DF = [1, 2, 3, 4, 7, 10, 29, 60, 200]


@pytest.mark.parametrize("df", GRID_DF)
def test_against_quadrature(df):
    for t in GRID_T:
        assert abs(t_two_sided_p(t, df) - quad_two_sided_p(t, df)) <= 1e-8, (t, df)


@pytest.mark.parametrize("t, p", REPORTED_T_P)
def test_reported_t_p_pairs(t, p):
    assert abs(t_two_sided_p(t, 2) - p) <= 1e-4


def test_df2_closed_form():
    # for df = 2 the two-sided p is 1 - |t| / sqrt(2 + t^2)
    for t in (0.3, 1.7, 6.92, 30.07):
        assert t_two_sided_p(t, 2) == pytest.approx(1 - t / math.sqrt(2 + t * t), abs=1e-13)


@pytest.mark.parametrize("a, b, x", [(0.5, 0.5, 0.3), (1.0, 0.5, 0.99), (15, 0.5, 0.2), (2.5, 7.0, 0.6), (100, 0.5, 0.999)])
def test_betainc_vs_mpmath(a, b, x):
    assert betainc(a, b, x) == pytest.approx(float(mpmath.betainc(a, b, 0, x, regularized=True)), abs=1e-12)


def test_betainc_edges():
    assert betainc(2, 3, 0.0) == 0.0 and betainc(2, 3, 1.0) == 1.0
    with pytest.raises(ValueError):
        betainc(0, 1, 0.5)
    with pytest.raises(ValueError):
        betainc(1, 1, 1.5)


@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(1, 300))
def test_monotone_and_symmetric(t1, t2, df):
    assert t_two_sided_p(t1, df) == pytest.approx(t_two_sided_p(-t1, df), abs=1e-14)
    lo, hi = sorted((abs(t1), abs(t2)))
    assert t_two_sided_p(lo, df) >= t_two_sided_p(hi, df) - 1e-14
    assert t_cdf(min(t1, t2), df) <= t_cdf(max(t1, t2), df) + 1e-14
    assert 0.0 <= t_two_sided_p(t1, df) <= 1.0


def test_one_sample_formula():
    xs = [0.875, 0.8775, 0.8758]
    res = t_test(xs, 0.8421)
    mean = sum(xs) / 3
    std = math.sqrt(sum((x - mean) ** 2 for x in xs) / 2)
    assert res.df == 2 and res.variant is TTestVariant.ONE_SAMPLE_VS_FIXED
    assert res.t_stat == pytest.approx((mean - 0.8421) * math.sqrt(3) / std)
    assert res.p_value == pytest.approx(t_two_sided_p(res.t_stat, 2))


def test_pooled_matches_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    a, b = [1.2, 2.3, 2.9, 3.1], [0.4, 1.1, 0.9]
    res = t_test(a, b)
    ref = scipy_stats.ttest_ind(a, b, equal_var=True)
    assert res.variant is TTestVariant.TWO_SAMPLE_POOLED and res.df == 5
    assert res.t_stat == pytest.approx(ref.statistic) and res.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_zero_variance():
    res = t_test([0.9, 0.9, 0.9], 0.8)
    assert res.t_stat == math.inf and res.p_value == 0.0 and "zero_variance" in res.flags
    res = t_test([0.9, 0.9], 0.9)
    assert res.t_stat == 0.0 and res.p_value == 1.0


def test_too_few_samples():
    with pytest.raises(EmptyInputError):
        t_test([0.9], 0.8)
    with pytest.raises(EmptyInputError):
        t_test([0.9, 0.8], [0.7])


@pytest.mark.parametrize(
    "p, stars",
    [(0.05, ""), (0.0499, "*"), (0.01, "*"), (0.0099, "**"), (0.001, "**"), (0.00099, "***"), (0.5, "")],
)
def test_star_thresholds(p, stars):
    assert significance_stars(p) == stars
