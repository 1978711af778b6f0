from __future__ import annotations

import json
from pathlib import Path

import pytest

from kamac.core import CaseRecord
from kamac.gateway import Gateway, ScriptedBackend

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def make_case(case_id: str = "c1", labels: str = "ABCD", gold: str = "A", **kw) -> CaseRecord:
    options = {label: f"option {label.lower()}" for label in labels}
    return CaseRecord(case_id=case_id, stem=kw.pop("stem", "Which option is right?"), options=options, gold_label=gold, **kw)


def scripted(name_or_rules) -> tuple[ScriptedBackend, Gateway]:
    """Backend + uncached gateway from a fixture name ("s1") or a rule list."""
    if isinstance(name_or_rules, str):
        backend = ScriptedBackend.from_file(FIXTURES / f"{name_or_rules}.json")
    else:
        from kamac.gateway import ScriptRule

        backend = ScriptedBackend([ScriptRule.from_dict(r) for r in name_or_rules])
    return backend, Gateway(backend, sleep=lambda s: None)


def load_rules(name: str) -> list[dict]:
    return json.loads((FIXTURES / f"{name}.json").read_text())["rules"]


@pytest.fixture
def case() -> CaseRecord:
    return make_case()


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


ROLE_POOL = [
    "Internist",
    "Pathologist",
    "Radiologist",
    "Medical Oncologist",
    "Radiation Oncologist",
    "Surgical Oncologist (Recurrence/Secondary Cancers)",
    "Cardiologist",
    "Dietitian",
]
GARBAGE = ["???", "lorem ipsum dolor", "1. 2. 3.", "Hierarchy: A > B", "(Z)", "maybe later", "- - -", "Answer:"]


def adversarial_responder(rng):
    """Reply generator mixing valid, contradictory and garbage text for every phase."""
    from kamac.gateway import Phase

    def roster_text():
        k = rng.randint(1, 5)
        roles = [rng.choice(ROLE_POOL) for _ in range(k)]
        return "\n".join(f"{i}. {r} - does {r.lower()} things - Hierarchy: Independent" for i, r in enumerate(roles, 1))

    def respond(request):
        phase = request.tag.phase
        roll = rng.random()
        if phase in (Phase.RECRUIT_INITIAL, Phase.RECRUIT_MORE):
            if roll < 0.55:
                return roster_text()
            if roll < 0.75:
                return "answer: <skip recruitment>"
            return rng.choice(GARBAGE)
        if phase is Phase.KG_DETECT:
            return rng.choice(["Yes. A Pathologist is needed.", "no", "YES", "No.", "yes - needs Dietitian"] + GARBAGE)
        if phase is Phase.INTERACT:
            return rng.choice(["yes", "no", "No thanks", "Yes please"] + GARBAGE)
        return rng.choice(["Answer: (A)", "Answer: (B)", "Answer: (A) then Answer: (C)", "B"] + GARBAGE)

    return respond


# -- acceptance summary --------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        _criteria[number] = (verdict, title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"{verdict} criterion {number}: {title}")
