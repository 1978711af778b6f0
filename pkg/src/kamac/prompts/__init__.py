"""Prompt families rendered from versioned text assets.

Templates live in ``templates/<ID>.system.txt`` and ``templates/<ID>.user.txt``
and use ``{{name}}`` placeholders. Rendering is a single substitution pass
and fails loudly on any unbound name.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

from ..core import Box3D, CaseRecord, ExpertSpec, OpinionBoard
from ..errors import UnboundPlaceholderError, ValidationError

TEMPLATE_VERSION = "1"

PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class TemplateId(str, Enum):
    P1 = "P1"
    P1_STRICT = "P1_strict"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    P5 = "P5"
    P6 = "P6"
    P7 = "P7"
    P7_REFINE = "P7_refine"
    SINGLE = "Single"
    VISUAL_COT = "VisualCoT"


# Declared placeholder sets; a test checks them against the asset files.
PLACEHOLDERS: dict[TemplateId, tuple[str, ...]] = {
    TemplateId.P1: ("question", "num_agents"),
    TemplateId.P1_STRICT: ("question", "num_agents"),
    TemplateId.P2: ("role", "description", "visual_cot", "fewshot_examplers", "question", "answer_template"),
    TemplateId.P3: ("assessment",),
    TemplateId.P4: ("agents",),
    TemplateId.P5: ("agents", "assessment"),
    TemplateId.P6: ("question", "answer_template", "final_answer_template"),
    TemplateId.P7: ("assessment", "final_answer_template", "question"),
    TemplateId.P7_REFINE: ("assessment", "final_answer_template", "question"),
    TemplateId.SINGLE: ("question", "cot_instruction", "answer_template"),
    TemplateId.VISUAL_COT: ("bbox_coords",),
}

COT_INSTRUCTION = "Let's think step by step, then give your answer.\n\n"


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    system_text: str | None
    user_text: str
    placeholders: tuple[str, ...]

    def found_placeholders(self) -> set[str]:
        names = set(PLACEHOLDER.findall(self.user_text))
        if self.system_text:
            names |= set(PLACEHOLDER.findall(self.system_text))
        return names


def _read_asset(name: str) -> str | None:
    ref = resources.files(__package__).joinpath("templates", name)
    if not ref.is_file():
        return None
    text = ref.read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


@lru_cache(maxsize=None)
def load_template(template_id: TemplateId | str) -> PromptTemplate:
    tid = TemplateId(template_id)
    user = _read_asset(f"{tid.value}.user.txt")
    if user is None:
        raise FileNotFoundError(f"missing template asset for {tid.value}")
    return PromptTemplate(tid, _read_asset(f"{tid.value}.system.txt"), user, PLACEHOLDERS[tid])


def _fill(text: str, bindings: Mapping[str, object]) -> str:
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), text)


def render(template_id: TemplateId | str, bindings: Mapping[str, object]) -> tuple[str | None, str]:
    """Return ``(system_text, user_text)``; identical bindings give identical bytes."""
    tpl = load_template(template_id)
    missing = [name for name in tpl.found_placeholders() if name not in bindings]
    if missing:
        raise UnboundPlaceholderError(tpl.id.value, missing)
    system = _fill(tpl.system_text, bindings) if tpl.system_text is not None else None
    return system, _fill(tpl.user_text, bindings)


# --------------------------------------------------------------------------
# answer formats


@dataclass(frozen=True)
class AnswerTemplate:
    body: str


def _label_list(labels: Sequence[str]) -> str:
    return ", ".join(labels)


def answer_template(labels: Sequence[str]) -> AnswerTemplate:
    return AnswerTemplate(
        "Explain your reasoning briefly, then finish with one final line of the form\n"
        f"Answer: (X)\nwhere X is one of the option labels {_label_list(labels)}."
    )


def final_answer_template(labels: Sequence[str]) -> AnswerTemplate:
    return AnswerTemplate(f"Answer: (X)\nReplace X with one of {_label_list(labels)} and write nothing after this line.")


# --------------------------------------------------------------------------
# binding helpers


def format_question(case: CaseRecord) -> str:
    lines = [case.stem.rstrip(), ""]
    lines += [f"({label}) {text}" for label, text in case.options.items()]
    return "\n".join(lines)


def format_boxes(boxes: Iterable[Box3D]) -> str:
    """Each box as ``[z_min, z_max, y_min, y_max, x_min, x_max]``."""
    return "; ".join("[" + ", ".join(f"{v:.3f}" for v in box.as_tuple()) + "]" for box in boxes)


def agents_line(roster: Iterable[ExpertSpec]) -> str:
    return ", ".join(e.role for e in roster)


def render_board(board: OpinionBoard, char_budget: int | None = None) -> str:
    """Render the opinion board as labelled blocks.

    With a ``char_budget`` the newest rounds are kept first and older
    entries are dropped whole until the rendering fits.
    """
    blocks = [f"[{e.role}, round {e.round}] {e.text.strip()}" for e in board.entries]
    if char_budget is not None:
        kept: list[str] = []
        used = 0
        for block in reversed(blocks):
            cost = len(block) + 2
            if kept and used + cost > char_budget:
                break
            kept.append(block)
            used += cost
        blocks = kept[::-1]
    return "\n\n".join(blocks)


def scope_clause(scope: str) -> str:
    """Relative clause introducing a role's scope: ``who ...`` or ``whose expertise ...``."""
    text = scope.strip().rstrip(".").strip()
    if not text:
        raise ValidationError("an expert needs a non-empty scope description")
    lowered = text.lower()
    if lowered.startswith("your "):
        return "whose " + text[5:]
    if lowered.startswith("expertise "):
        return "whose " + text
    if lowered.startswith(("who ", "whose ")):
        return text
    return "who " + text[0].lower() + text[1:]


def render_role_system(expert: ExpertSpec) -> str:
    system, _ = render(
        TemplateId.P2,
        {
            "role": expert.role,
            "description": scope_clause(expert.scope),
            "visual_cot": "",
            "fewshot_examplers": "",
            "question": "",
            "answer_template": "",
        },
    )
    assert system is not None
    return system


def visual_cot_block(case: CaseRecord) -> str:
    if not case.roi_boxes:
        return ""
    _, user = render(TemplateId.VISUAL_COT, {"bbox_coords": format_boxes(case.roi_boxes)})
    return user + "\n\n"


def assessment_prompt(expert: ExpertSpec, case: CaseRecord, context: str = "") -> str:
    """P2 user text for one expert; ``context`` is appended to the dataset examplers."""
    examplers = "\n\n".join(part for part in (case.fewshot_examplers.strip(), context.strip()) if part)
    _, user = render(
        TemplateId.P2,
        {
            "role": expert.role,
            "description": scope_clause(expert.scope),
            "visual_cot": visual_cot_block(case),
            "fewshot_examplers": examplers,
            "question": format_question(case),
            "answer_template": answer_template(case.labels).body,
        },
    )
    return user


__all__ = [
    "AnswerTemplate",
    "COT_INSTRUCTION",
    "PLACEHOLDERS",
    "PromptTemplate",
    "TEMPLATE_VERSION",
    "TemplateId",
    "agents_line",
    "answer_template",
    "assessment_prompt",
    "final_answer_template",
    "format_boxes",
    "format_question",
    "load_template",
    "render",
    "render_board",
    "render_role_system",
    "scope_clause",
    "visual_cot_block",
]
