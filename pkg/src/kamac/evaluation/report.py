"""Usage summaries, expert histograms and results tables."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

from ..core import LedgerSummary, UsageLedger, ledger_merge, normalize_role
from .metrics import MetricRow


def usage_summary(ledgers: Sequence[UsageLedger]) -> LedgerSummary:
    return ledger_merge(ledgers)


def _roles_of(result: Any) -> list[str]:
    timeline = getattr(result, "roster_timeline", None)
    if timeline is not None:
        return [role for _, added in timeline for role in added]
    return list(result)


def expert_histogram(results: Iterable[Any]) -> list[tuple[str, int]]:
    """Count how often each (normalized) role joins a team, most frequent first.

    ``results`` holds objects with a ``roster_timeline`` or plain role lists.
    Equal counts are ordered lexicographically.
    """
    counts: Counter[str] = Counter()
    for result in results:
        counts.update({normalize_role(r) for r in _roles_of(result)})
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass(frozen=True)
class OverlapResult:
    value: float
    k: int
    truncated: bool


def top_k(histogram: Sequence[tuple[str, int]], k: int) -> list[str]:
    ordered = sorted(((normalize_role(r), c) for r, c in histogram), key=lambda kv: (-kv[1], kv[0]))
    return [r for r, _ in ordered[:k]]


def overlap(a: Sequence[tuple[str, int]], b: Sequence[tuple[str, int]], k: int = 30) -> OverlapResult:
    """Share of the top-``k`` roles common to both histograms.

    When either histogram has fewer than ``k`` roles the denominator shrinks
    to the available set and ``truncated`` is set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ta, tb = top_k(a, k), top_k(b, k)
    k_eff = min(k, len(ta), len(tb))
    if k_eff == 0:
        return OverlapResult(0.0, 0, True)
    common = len(set(ta[:k_eff]) & set(tb[:k_eff])) if k_eff < k else len(set(ta) & set(tb))
    return OverlapResult(common / k_eff, k_eff, k_eff < k)


# --------------------------------------------------------------------------
# results table


@dataclass(frozen=True)
class ResultRow:
    method: str
    dataset: str
    profile: str
    model: str
    n_cases: int
    failed: int
    averaging: str
    acc: float
    prec: float
    spec: float
    recall: float
    avg: float
    experts: float
    api_calls: float
    prompt_tokens: int
    completion_tokens: int
    cost: float

    @classmethod
    def build(cls, *, metric: MetricRow, summary: LedgerSummary, **meta: Any) -> "ResultRow":
        acc, prec, spec, recall, avg = metric.rounded()
        return cls(
            acc=acc,
            prec=prec,
            spec=spec,
            recall=recall,
            avg=avg,
            experts=round(summary.mean_experts, 2),
            api_calls=round(summary.mean_chat_calls, 2),
            prompt_tokens=summary.total_prompt_tokens,
            completion_tokens=summary.total_completion_tokens,
            cost=round(summary.total_cost, 6),
            **meta,
        )

    def metric_row(self) -> MetricRow:
        return MetricRow(self.acc, self.prec, self.spec, self.recall)


RESULT_COLUMNS = [f.name for f in fields(ResultRow)]
_FLOAT_2 = {"acc", "prec", "spec", "recall", "avg", "experts", "api_calls"}


def _fmt(name: str, value: Any) -> str:
    if name in _FLOAT_2:
        return f"{value:.2f}"
    if name == "cost":
        return f"{value:.6f}"
    return str(value)


def write_results(path: str | Path, rows: Sequence[ResultRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for row in rows:
        d = asdict(row)
        w.writerow([_fmt(c, d[c]) for c in RESULT_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_results(path: str | Path) -> list[ResultRow]:
    types = {f.name: f.type for f in fields(ResultRow)}
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh, delimiter="\t"):
            kw: dict[str, Any] = {}
            for name in RESULT_COLUMNS:
                raw = rec[name]
                t = types[name]
                kw[name] = int(raw) if t in ("int", int) else float(raw) if t in ("float", float) else raw
            out.append(ResultRow(**kw))
    return out


def render_table(rows: Sequence[ResultRow], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or ["method", "dataset", "acc", "prec", "spec", "recall", "avg", "experts", "api_calls", "cost"])
    cells = [[_fmt(c, getattr(r, c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) if i > 1 else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)
