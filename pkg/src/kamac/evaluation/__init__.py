"""Metrics, usage reports and significance tests."""

from .metrics import ClassCounts, ConfusionCounts, MetricRow, class_rates, confusion, metrics
from .report import (
    OverlapResult,
    ResultRow,
    expert_histogram,
    overlap,
    read_results,
    render_table,
    top_k,
    usage_summary,
    write_results,
)
from .stats import TTestResult, TTestVariant, betainc, significance_stars, t_cdf, t_test, t_two_sided_p

__all__ = [
    "ClassCounts",
    "ConfusionCounts",
    "MetricRow",
    "OverlapResult",
    "ResultRow",
    "TTestResult",
    "TTestVariant",
    "betainc",
    "class_rates",
    "confusion",
    "expert_histogram",
    "metrics",
    "overlap",
    "read_results",
    "render_table",
    "significance_stars",
    "t_cdf",
    "t_test",
    "t_two_sided_p",
    "top_k",
    "usage_summary",
    "write_results",
]
