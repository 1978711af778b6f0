import itertools
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kamac.core import ABSTAIN
from kamac.errors import ValidationError
from kamac.evaluation import ConfusionCounts, MetricRow, confusion, metrics
from reported_values import REPORTED_ROWS


def oracle(pairs, labels, mode, positive=None):
    """Metrics straight from a gold x prediction matrix, in exact fractions."""
    n = len(pairs)
    matrix = Counter((gold, pred) for pred, gold in pairs)

    def frac(a, b):
        return Fraction(a, b) if b else Fraction(0)

    rates = {}
    for c in labels:
        tp = matrix[(c, c)]
        predicted_c = sum(v for (g, p), v in matrix.items() if p == c)
        gold_c = sum(v for (g, p), v in matrix.items() if g == c)
        fp, fn = predicted_c - tp, gold_c - tp
        tn = n - tp - fp - fn
        rates[c] = (frac(tp, tp + fp), frac(tp, tp + fn), frac(tn, tn + fp))
    acc = frac(sum(matrix[(c, c)] for c in labels), n)
    if mode == "binary":
        prec, rec, spec = rates[positive]
    else:
        k = len(labels)
        prec = sum(r[0] for r in rates.values()) / k
        rec = sum(r[1] for r in rates.values()) / k
        spec = sum(r[2] for r in rates.values()) / k
    return [float(100 * x) for x in (acc, prec, spec, rec)]


def impl(pairs, labels, mode, positive=None):
    preds = {f"c{i}": p for i, (p, _) in enumerate(pairs)}
    golds = {f"c{i}": g for i, (_, g) in enumerate(pairs)}
    row = metrics(confusion(preds, golds, labels), mode, positive)
    return [row.acc, row.prec, row.spec, row.recall], row


def multisets(labels, n):
    kinds = [(p, g) for p in list(labels) + [ABSTAIN] for g in labels]
    return itertools.combinations_with_replacement(kinds, n)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_exhaustive_against_oracle(k):
    labels = "ABC"[:k]
    checked = 0
    for n in range(1, 7):
        for pairs in multisets(labels, n):
            got, row = impl(pairs, labels, "macro")
            assert got == pytest.approx(oracle(pairs, labels, "macro"), abs=1e-9)
            assert row.avg == pytest.approx(sum(got) / 4, abs=1e-12)
            if k == 2:
                got_b, _ = impl(pairs, labels, "binary", "A")
                assert got_b == pytest.approx(oracle(pairs, labels, "binary", "A"), abs=1e-9)
            checked += 1
    assert checked > 0


def test_order_does_not_matter():
    # the multiset enumeration above relies on this
    pairs = [("A", "A"), (ABSTAIN, "B"), ("B", "A"), ("C", "C")]
    base, _ = impl(pairs, "ABC", "macro")
    for perm in itertools.permutations(pairs):
        assert impl(list(perm), "ABC", "macro")[0] == base


labels4 = st.sampled_from("ABCD")


@settings(max_examples=300)
@given(st.lists(st.tuples(st.one_of(labels4, st.just(ABSTAIN)), labels4), min_size=1, max_size=12))
def test_random_up_to_12_cases_4_classes(pairs):
    got, row = impl(pairs, "ABCD", "macro")
    assert got == pytest.approx(oracle(pairs, "ABCD", "macro"), abs=1e-9)
    assert all(0 <= v <= 100 for v in got)


def test_binary_fixture():
    row = metrics(ConfusionCounts.binary(tp=3, fp=1, fn=1, tn=5), "binary", "A")
    assert [round(v, 2) for v in (row.acc, row.prec, row.spec, row.recall)] == [80.00, 75.00, 83.33, 75.00]


def test_perfect_predictor():
    golds = {f"c{i}": "AB"[i % 2] for i in range(10)}
    counts = confusion(dict(golds), golds)
    assert all(c.fp == 0 and c.fn == 0 for c in counts.per_class.values())


def test_all_abstain():
    golds = {"a": "A", "b": "B"}
    row = metrics(confusion({"a": None, "b": ABSTAIN}, golds), "macro")
    assert row.acc == 0


def test_degenerate_class_is_flagged():
    golds = {f"c{i}": "A" for i in range(4)}
    row = metrics(confusion(dict(golds), golds, ["A", "B"]), "macro")
    assert "spec[A]=0/0" in row.flags
    assert "prec[B]=0/0" in row.flags and "recall[B]=0/0" in row.flags


def test_mismatched_ids():
    with pytest.raises(ValidationError):
        confusion({"a": "A"}, {"b": "A"})


def test_counts_must_sum():
    from kamac.evaluation import ClassCounts

    with pytest.raises(ValidationError):
        ConfusionCounts({"A": ClassCounts(1, 1, 1, 1)}, n_cases=5, n_correct=1)


def test_unknown_mode():
    with pytest.raises(ValidationError):
        metrics(ConfusionCounts.binary(1, 1, 1, 1), "micro")


@pytest.mark.parametrize("name", sorted(REPORTED_ROWS))
def test_reported_avg_column(name):
    acc, prec, spec, recall, printed = REPORTED_ROWS[name]
    assert abs(MetricRow(acc, prec, spec, recall).avg - printed) <= 0.01
