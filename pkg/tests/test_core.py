import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kamac.core import (
    Box3D,
    CaseRecord,
    DiscussionState,
    EdgeKind,
    ExpertSpec,
    HierarchyEdge,
    Message,
    Modality,
    OpinionBoard,
    RunConfig,
    Speaker,
    UsageLedger,
    Verdict,
    ledger_merge,
    normalize_role,
)
from kamac.errors import EmptyInputError, InvalidRoleError, ValidationError
from kamac.parsing import format_hierarchy, parse_hierarchy


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("  Cardiologist ", "cardiologist"),
        ("Medical  Geneticist", "medical geneticist"),
        ("Surgical Oncologist (Recurrence/Secondary Cancers)", "surgical oncologist (recurrence/secondary cancers)"),
    ],
)
def test_normalize_role(raw, expected):
    assert normalize_role(raw) == expected


@pytest.mark.parametrize("raw", ["", "   ", "\t\n"])
def test_normalize_role_rejects_blank(raw):
    with pytest.raises(InvalidRoleError):
        normalize_role(raw)


def test_peer_edges_are_canonical():
    a = HierarchyEdge(EdgeKind.PEER, "Radiologist", "Cardiologist")
    b = HierarchyEdge(EdgeKind.PEER, "cardiologist", "radiologist")
    assert a == b
    assert (a.from_role, a.to_role) == ("cardiologist", "radiologist")
    d = HierarchyEdge(EdgeKind.DIRECTED, "Radiologist", "Cardiologist")
    assert (d.from_role, d.to_role) == ("radiologist", "cardiologist")


role_names = st.sampled_from(
    ["Pediatrician", "Cardiologist", "Medical Geneticist", "Radiation Oncologist", "Pathologist", "Nurse (Oncology)"]
)
edges_st = st.lists(
    st.builds(HierarchyEdge, st.sampled_from([EdgeKind.PEER, EdgeKind.DIRECTED]), role_names, role_names),
    max_size=6,
    unique=True,
)


@given(edges_st)
def test_edge_serialization_idempotent(edges):
    once = parse_hierarchy(format_hierarchy(edges))
    assert once == tuple(edges)
    assert parse_hierarchy(format_hierarchy(once)) == once


def test_box_validation():
    Box3D(0, 1, 0, 1, 0, 1)
    with pytest.raises(ValidationError):
        Box3D(0.5, 0.4, 0, 1, 0, 1)
    with pytest.raises(ValidationError):
        Box3D(0, 1.2, 0, 1, 0, 1)


def test_case_record_invariants():
    with pytest.raises(ValidationError):
        CaseRecord("x", "q", {"A": "a"}, "B")
    with pytest.raises(ValidationError):
        CaseRecord("x", "q", {}, "A")
    with pytest.raises(ValidationError):
        CaseRecord("x", "q", {"a1": "a"}, "a1")
    with pytest.raises(ValidationError):
        CaseRecord("x", "q", {"A": "a"}, "A", roi_boxes=(Box3D(0, 1, 0, 1, 0, 1),))
    c = CaseRecord(
        "x",
        "q",
        {"A": "a", "B": "b"},
        "B",
        modality=Modality.TEXT_WITH_IMAGE,
        clinical_vars={"Age": "62"},
        image_ref="img.png",
        roi_boxes=(Box3D(0, 1, 0, 1, 0, 1),),
    )
    assert CaseRecord.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_message_requires_content():
    with pytest.raises(ValidationError):
        Message(Speaker.AGENT, 1, "", "Internist")


def test_board_one_entry_per_role_round_phase():
    board = OpinionBoard().add("Internist", "a", 1)
    board = board.add("Internist", "b", 1, "interact")
    with pytest.raises(ValidationError):
        board.add("internist", "c", 1)
    assert [e.text for e in board.entries] == ["a", "b"]


def test_discussion_state_round_starts_at_one():
    with pytest.raises(ValidationError):
        DiscussionState(round_r=0, roster=())


def test_expert_roundtrip():
    e = ExpertSpec("Pathologist", "reads slides", (HierarchyEdge(EdgeKind.PEER, "Pathologist", "Internist"),), 2)
    assert ExpertSpec.from_dict(e.to_dict()) == e
    assert e.key == "pathologist"


def test_verdict_roundtrip():
    v = Verdict("A", "majority_vote", {"X": "A"}, {"A": 1}, "text")
    assert Verdict.from_dict(v.to_dict()) == v


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.temperature, cfg.max_rounds_R, cfg.initial_experts_N) == (0.0, 3, 1)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        RunConfig(initial_experts_N=0)


def test_cost_uses_price_table():
    cfg = RunConfig(price_per_million=(2.0, 8.0))
    assert cfg.cost(1_000_000, 500_000) == pytest.approx(6.0)


def test_ledger_merge_means():
    a = UsageLedger("a", expert_count=1, backend_calls=2, wall_time=1.0, monetary_cost=0.5)
    b = UsageLedger("b", expert_count=2, backend_calls=2, wall_time=3.0, monetary_cost=0.25)
    s = ledger_merge([a, b])
    assert s.mean_experts == 1.5
    assert s.mean_backend_calls == 2.0
    assert s.mean_wall_time == 2.0
    assert s.total_cost == 0.75


def test_ledger_merge_empty():
    with pytest.raises(EmptyInputError):
        ledger_merge([])
