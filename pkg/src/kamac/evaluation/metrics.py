"""One-vs-rest confusion counts and the four reported metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

from ..core import ABSTAIN
from ..errors import ValidationError


class ClassCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ConfusionCounts:
    per_class: dict[str, ClassCounts]
    n_cases: int
    n_correct: int

    def __post_init__(self) -> None:
        for label, c in self.per_class.items():
            if min(c) < 0:
                raise ValidationError(f"negative count for class {label}")
            if c.total != self.n_cases:
                raise ValidationError(f"class {label}: tp+fp+fn+tn = {c.total} != {self.n_cases} cases")

    @classmethod
    def binary(cls, tp: int, fp: int, fn: int, tn: int, positive: str = "A", negative: str = "B") -> "ConfusionCounts":
        """Both one-vs-rest views of a 2x2 table given from the positive class."""
        return cls(
            {positive: ClassCounts(tp, fp, fn, tn), negative: ClassCounts(tn, fn, fp, tp)},
            n_cases=tp + fp + fn + tn,
            n_correct=tp + tn,
        )


@dataclass(frozen=True)
class MetricRow:
    """Percentages in [0, 100], kept at full precision."""

    acc: float
    prec: float
    spec: float
    recall: float
    flags: tuple[str, ...] = field(default=())

    @property
    def avg(self) -> float:
        return (self.acc + self.prec + self.spec + self.recall) / 4.0

    def rounded(self) -> tuple[float, float, float, float, float]:
        return tuple(round(v, 2) for v in (self.acc, self.prec, self.spec, self.recall, self.avg))  # type: ignore[return-value]


def _is_abstain(label: str | None) -> bool:
    return label is None or label == ABSTAIN or label == ""


def confusion(
    preds: Mapping[str, str | None] | Iterable[tuple[str, str | None]],
    golds: Mapping[str, str],
    labels: Sequence[str] | None = None,
) -> ConfusionCounts:
    """Per-class one-vs-rest counts. Abstentions are wrong for every class."""
    pred_map = dict(preds.items() if isinstance(preds, Mapping) else preds)
    if set(pred_map) != set(golds):
        missing = sorted(set(golds) - set(pred_map))
        extra = sorted(set(pred_map) - set(golds))
        raise ValidationError(f"prediction/gold case ids differ: missing {missing[:5]}, unexpected {extra[:5]}")
    if labels is None:
        seen = set(golds.values()) | {p for p in pred_map.values() if not _is_abstain(p)}
        labels = sorted(seen)
    per_class: dict[str, list[int]] = {label: [0, 0, 0, 0] for label in labels}
    n_correct = 0
    for case_id, gold in golds.items():
        pred = pred_map[case_id]
        if not _is_abstain(pred) and pred == gold:
            n_correct += 1
        for label, c in per_class.items():
            hit_p = not _is_abstain(pred) and pred == label
            hit_g = gold == label
            if hit_p and hit_g:
                c[0] += 1
            elif hit_p:
                c[1] += 1
            elif hit_g:
                c[2] += 1
            else:
                c[3] += 1
    return ConfusionCounts({k: ClassCounts(*v) for k, v in per_class.items()}, len(golds), n_correct)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def class_rates(c: ClassCounts, label: str, flags: list[str]) -> tuple[float, float, float]:
    """(precision, recall, specificity) for one class; 0/0 is reported as 0 and flagged."""
    prec = _ratio(c.tp, c.tp + c.fp, f"prec[{label}]=0/0", flags)
    recall = _ratio(c.tp, c.tp + c.fn, f"recall[{label}]=0/0", flags)
    spec = _ratio(c.tn, c.tn + c.fp, f"spec[{label}]=0/0", flags)
    return prec, recall, spec


def metrics(counts: ConfusionCounts, mode: str = "macro", positive_label: str | None = None) -> MetricRow:
    """``mode="macro"`` averages per-class rates; ``mode="binary"`` reports the positive class.

    Accuracy is pooled (correct / cases) in both modes.
    """
    flags: list[str] = []
    acc = _ratio(counts.n_correct, counts.n_cases, "acc=0/0", flags)
    if mode == "binary":
        if positive_label is None or positive_label not in counts.per_class:
            raise ValidationError(f"binary metrics need a positive label among {list(counts.per_class)}")
        prec, recall, spec = class_rates(counts.per_class[positive_label], positive_label, flags)
    elif mode == "macro":
        rates = [class_rates(c, label, flags) for label, c in counts.per_class.items()]
        k = len(rates)
        if k == 0:
            flags.append("no classes")
            prec = recall = spec = 0.0
        else:
            prec = sum(r[0] for r in rates) / k
            recall = sum(r[1] for r in rates) / k
            spec = sum(r[2] for r in rates) / k
    else:
        raise ValidationError(f"unknown averaging mode {mode!r}")
    return MetricRow(100 * acc, 100 * prec, 100 * spec, 100 * recall, tuple(flags))
