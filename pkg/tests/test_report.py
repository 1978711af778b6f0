import pytest
from hypothesis import given
from hypothesis import strategies as st

from kamac.core import UsageLedger
from kamac.errors import EmptyInputError
from kamac.evaluation import MetricRow, ResultRow, expert_histogram, overlap, read_results, render_table, usage_summary, write_results
from kamac.evaluation.report import top_k


def test_usage_summary_means():
    ledgers = [
        UsageLedger("a", 1, backend_calls=6, chat_calls=6, prompt_tokens=100, completion_tokens=10, monetary_cost=0.01),
        UsageLedger("b", 3, backend_calls=0, chat_calls=22, prompt_tokens=300, completion_tokens=30, monetary_cost=0.02),
    ]
    s = usage_summary(ledgers)
    assert s.n_cases == 2 and s.mean_experts == 2.0
    assert s.mean_chat_calls == 14.0 and s.mean_backend_calls == 3.0
    assert s.total_prompt_tokens == 400 and s.total_cost == pytest.approx(0.03)


def test_usage_summary_empty():
    with pytest.raises(EmptyInputError):
        usage_summary([])


def test_usage_fraction_of_recruiting_cases():
    # 25 cases, 7 recruit a second expert -> 1.28 experts on average
    ledgers = [UsageLedger(f"c{i}", 2 if i < 7 else 1, 1) for i in range(25)]
    assert round(usage_summary(ledgers).mean_experts, 2) == 1.28


class _R:
    def __init__(self, timeline):
        self.roster_timeline = timeline


def test_histogram_counts_each_case_once():
    results = [
        _R([(0, ["Cardiologist"]), (1, ["Pathologist", "cardiologist "])]),
        _R([(0, ["Neurologist"]), (2, ["Pathologist"])]),
        ["Cardiologist", "Pathologist"],
    ]
    hist = expert_histogram(results)
    assert hist[0] == ("pathologist", 3)
    assert dict(hist)["cardiologist"] == 2
    assert hist[-1] == ("neurologist", 1)


def test_histogram_ties_are_lexicographic():
    assert [r for r, _ in expert_histogram([["Zoologist", "Anatomist"]])] == ["anatomist", "zoologist"]


def _hist(names):
    return [(n, 100 - i) for i, n in enumerate(names)]


def test_overlap_identical_and_disjoint():
    a = _hist([f"R{i}" for i in range(40)])
    assert overlap(a, a).value == 1.0
    b = _hist([f"S{i}" for i in range(40)])
    res = overlap(a, b)
    assert res.value == 0.0 and res.k == 30 and not res.truncated


def test_overlap_24_of_30():
    a = _hist([f"R{i}" for i in range(30)])
    b = _hist([f"R{i}" for i in range(24)] + [f"S{i}" for i in range(6)])
    assert overlap(a, b, k=30).value == pytest.approx(0.80)


def test_overlap_truncates():
    a = _hist([f"R{i}" for i in range(10)])
    b = _hist([f"R{i}" for i in range(40)])
    res = overlap(a, b)
    assert res.truncated and res.k == 10 and res.value == 1.0
    assert overlap([], b).k == 0
    with pytest.raises(ValueError):
        overlap(a, b, k=0)


@given(st.lists(st.sampled_from([f"R{i}" for i in range(12)]), max_size=30), st.integers(1, 12))
def test_overlap_bounds(roles, k):
    hist = expert_histogram([[r] for r in roles])
    res = overlap(hist, hist, k)
    assert res.value == (1.0 if hist else 0.0)
    assert len(top_k(hist, k)) == min(k, len(hist))


def _row(**kw):
    base = dict(method="kamac", dataset="medqa_small", profile="medqa", model="gpt-4.1-mini", n_cases=3, failed=0, averaging="macro")
    base.update(kw)
    metric = MetricRow(88.14, 88.30, 97.02, 88.11)
    summary = usage_summary([UsageLedger("a", 1, 6, 6, 10, 2, 0.1, 0.000123), UsageLedger("b", 2, 22, 22, 40, 8)])
    return ResultRow.build(metric=metric, summary=summary, **base)


def test_result_row_build():
    row = _row()
    assert (row.acc, row.avg, row.experts, row.api_calls) == (88.14, 90.39, 1.5, 14.0)
    assert row.prompt_tokens == 50 and row.cost == 0.000123


def test_results_roundtrip(tmp_path):
    rows = [_row(), _row(method="single", failed=1)]
    path = tmp_path / "out.tsv"
    write_results(path, rows)
    assert read_results(path) == rows
    first = path.read_bytes()
    write_results(path, read_results(path))
    assert path.read_bytes() == first


def test_render_table_aligns():
    text = render_table([_row(), _row(method="cot")])
    lines = text.splitlines()
    assert len(lines) == 4 and len({len(l) for l in lines}) == 1
    assert "90.39" in lines[2]
