import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kamac.core import EdgeKind, ExpertSpec, HierarchyEdge, normalize_role
from kamac.errors import EmptyRosterError, UnparseableAnswerError
from kamac.parsing import (
    format_roster,
    parse_consensus,
    parse_final_answer,
    parse_hierarchy,
    parse_roster,
    parse_yes_no,
)
from kamac.prompts import TemplateId, load_template


def p1_example_block() -> str:
    text = load_template(TemplateId.P1).user_text
    return text[text.index("1. Pediatrician") : text.index("Please answer in the above format")]


def test_p1_example_block():
    parsed = parse_roster(p1_example_block())
    assert [e.role for e in parsed.experts] == [
        "Pediatrician",
        "Cardiologist",
        "Pulmonologist",
        "Neonatologist",
        "Medical Geneticist",
    ]
    cardio = parsed.experts[1]
    assert cardio.edges == (HierarchyEdge(EdgeKind.DIRECTED, "Pediatrician", "Cardiologist"),)
    assert all(not e.edges for i, e in enumerate(parsed.experts) if i != 1)
    assert parsed.experts[3].scope.startswith("Focuses on the care of newborn infants")


def test_p5_example_item():
    text = load_template(TemplateId.P5).user_text
    item = text[text.index("1. Medical Oncologist") : text.index("2. Other")]
    parsed = parse_roster(item, recruited_round=2)
    (e,) = parsed.experts
    assert e.role == "Medical Oncologist"
    assert e.edges == ()
    assert e.recruited_round == 2


@pytest.mark.parametrize(
    "text",
    [
        "<skip recruitment>",
        "The team is complete, so my answer: <skip recruitment>",
        "answer: <SKIP RECRUITMENT>.",
    ],
)
def test_skip_sentinel(text):
    parsed = parse_roster(text)
    assert parsed.skipped and parsed.experts == ()


def test_peer_chain_expansion():
    parsed = parse_roster("1. X - d - Hierarchy: A == B == C")
    assert parsed.experts[0].edges == (
        HierarchyEdge(EdgeKind.PEER, "A", "B"),
        HierarchyEdge(EdgeKind.PEER, "B", "C"),
    )


def test_arrow_and_gt_are_the_same():
    assert parse_hierarchy("A -> B") == parse_hierarchy("A > B")


def test_roster_drops_bad_items_and_duplicates():
    text = "\n".join(
        [
            "1. Pathologist - reads slides - Hierarchy: Independent",
            "2. just some words without a separator",
            "3. pathologist - duplicate - Hierarchy: Independent",
            "4. **Radiologist**: reads images",
        ]
    )
    parsed = parse_roster(text)
    assert [e.role for e in parsed.experts] == ["Pathologist", "Radiologist"]
    assert len(parsed.warnings) == 3  # separator, duplicate, missing hierarchy


def test_roster_multiline_items():
    text = "1. Cardiologist - Heart disease.\n- Hierarchy: Internist > Cardiologist\n2. Internist - General medicine. - Hierarchy: Independent"
    parsed = parse_roster(text)
    assert [e.role for e in parsed.experts] == ["Cardiologist", "Internist"]
    assert parsed.experts[0].edges[0].kind is EdgeKind.DIRECTED


def test_empty_roster_raises():
    with pytest.raises(EmptyRosterError):
        parse_roster("I would recruit a cardiologist.")


def test_qualifier_kept_in_role():
    parsed = parse_roster("1. Surgical Oncologist (Recurrence/Secondary Cancers) - handles recurrences - Hierarchy: Independent")
    assert parsed.experts[0].key == "surgical oncologist (recurrence/secondary cancers)"


experts_st = st.lists(
    st.builds(
        ExpertSpec,
        st.sampled_from(["Pathologist", "Medical Oncologist", "Radiologist", "Nurse (Oncology)", "Internist"]),
        st.sampled_from(["reads slides.", "Your expertise is strictly limited to imaging.", "general care"]),
        st.lists(
            st.builds(
                HierarchyEdge,
                st.sampled_from(list(EdgeKind)),
                st.sampled_from(["Pathologist", "Internist"]),
                st.sampled_from(["Radiologist", "Medical Oncologist"]),
            ),
            max_size=2,
            unique=True,
        ).map(tuple),
    ),
    min_size=1,
    max_size=5,
    unique_by=lambda e: e.key,
)


@given(experts_st)
def test_roster_roundtrip(experts):
    parsed = parse_roster(format_roster(experts))
    assert [e.key for e in parsed.experts] == [e.key for e in experts]
    assert [e.edges for e in parsed.experts] == [e.edges for e in experts]


@given(st.text(max_size=200))
def test_roster_dedup_and_never_crashes_unexpectedly(text):
    try:
        parsed = parse_roster(text)
    except EmptyRosterError:
        return
    keys = [e.key for e in parsed.experts]
    assert len(keys) == len(set(keys))
    assert not (parsed.skipped and parsed.experts)


# -- yes/no ---------------------------------------------------------------


def test_kg_yes_with_role():
    sig = parse_yes_no("Yes. A Pathologist is needed to review margins.")
    assert sig.gap and sig.requested_roles == ("Pathologist",)


def test_kg_needs_phrase():
    sig = parse_yes_no("yes \u2014 needs Pathologist")
    assert sig.gap and sig.requested_roles == ("Pathologist",)


def test_kg_type_of_expert_line():
    sig = parse_yes_no("Yes\nType of expert needed: Radiation Oncologist\nReason: dose planning")
    assert sig.requested_roles == ("Radiation Oncologist",)


def test_kg_role_dash_reason_lines():
    sig = parse_yes_no("Yes.\n- Speech Pathologist - swallowing assessment\n- Dietitian - nutrition support")
    assert sig.requested_roles == ("Speech Pathologist", "Dietitian")


def test_kg_no():
    sig = parse_yes_no("No, the current team suffices.")
    assert not sig.gap and sig.requested_roles == ()


def test_kg_ambiguous_fails_closed():
    sig = parse_yes_no("Possibly; unclear.")
    assert not sig.gap and sig.warnings


def test_first_token_decides():
    assert parse_yes_no("No. Yes, I am sure.").gap is False
    assert parse_yes_no("Yes, no doubt a Hepatologist is needed").gap is True


def test_word_boundaries():
    # "nothing" and "yesterday" are not answers
    assert parse_yes_no("nothing to add; yesterday").warnings


token_free = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=80).filter(
    lambda s: not any(w in s.lower() for w in ("yes", "no"))
)


@given(token_free)
def test_ambiguity_policies(text):
    assert parse_yes_no(text).gap is False
    assert parse_consensus(text).wants_more_talk is True


@given(st.text(max_size=300))
def test_yes_no_total(text):
    sig = parse_yes_no(text)
    if not sig.gap:
        assert sig.requested_roles == ()
    parse_consensus(text)


def test_consensus_examples():
    assert parse_consensus("no").wants_more_talk is False
    assert parse_consensus("Yes \u2014 I'd like the Radiologist's view.").wants_more_talk is True
    assert parse_consensus("qwpeoiru").wants_more_talk is True


# -- final answers ----------------------------------------------------------


@pytest.mark.parametrize(
    "text, labels, expected",
    [
        ("reasoning... Answer: (C)", "ABCD", "C"),
        ("Answer: (A) ... wait, Answer: (B)", "ABCD", "B"),
        ("The patient will survive. Answer: (A)", "AB", "A"),
        ("**Answer:** (d)", "ABCD", "D"),
        ("I pick (B) over (C), final (C)", "ABCD", "C"),
        ("Option B is best", "ABCD", "B"),
        ("Answer: (E) is not allowed, Answer: (A)", "ABCD", "A"),
    ],
)
def test_final_answer(text, labels, expected):
    assert parse_final_answer(text, tuple(labels)) == expected


def test_final_answer_unparseable():
    with pytest.raises(UnparseableAnswerError):
        parse_final_answer("I cannot decide.", ("A", "B"))
    with pytest.raises(ValueError):
        parse_final_answer("Answer: (A)", ())


@settings(max_examples=200)
@given(st.lists(st.sampled_from("ABCD"), min_size=1, max_size=4), st.text(alphabet="xyz .,\n", max_size=30))
def test_last_answer_line_wins(labels, noise):
    text = noise.join(f"Answer: ({l})" for l in labels)
    assert parse_final_answer(text, ("A", "B", "C", "D")) == labels[-1]
