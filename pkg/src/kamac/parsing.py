"""Turn free-text model replies into typed values."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from .core import EdgeKind, ExpertSpec, HierarchyEdge, clean_role, normalize_role
from .errors import EmptyRosterError, InvalidRoleError, UnparseableAnswerError

SKIP_SENTINEL = "<skip recruitment>"

_ITEM_START = re.compile(r"^\s*(?:[*#>]\s*)*(\d{1,3})[.)]\s*(.*)$")
_HIERARCHY = re.compile(r"(?:^|[\s\-\u2013\u2014*])\s*hierarchy\s*\**\s*:\s*\**\s*(.*)$", re.IGNORECASE | re.DOTALL)
_ROLE_SEP = re.compile(r"\s+[-\u2013\u2014]\s+|\s*[\u2013\u2014]\s*|\s*:\s+")
_CHAIN_OP = re.compile(r"\s*(==|->|>)\s*")
_CHAIN_SEP = re.compile(r"[,;](?![^()]*\))")  # commas outside parentheses separate chains
_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


@dataclass(frozen=True)
class RosterParse:
    experts: tuple[ExpertSpec, ...] = ()
    skipped: bool = False
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class KgSignal:
    gap: bool
    requested_roles: tuple[str, ...] = ()
    reason: str | None = None
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConsensusSignal:
    wants_more_talk: bool
    ambiguous: bool = False


def _strip_markup(text: str) -> str:
    return text.replace("**", "").replace("__", "").strip().strip("*").strip()


def _clean_role_token(text: str) -> str:
    role = clean_role(_strip_markup(text).strip("\"'`"))
    return role.rstrip(".:;,").strip()


def parse_hierarchy(spec: str) -> tuple[HierarchyEdge, ...]:
    """``Independent`` -> no edges; chains joined by ``==`` (peer) or ``>``/``->`` (directed).

    Several chains may be given separated by commas.
    """
    spec = _strip_markup(spec).strip().strip("\"'").rstrip(".").strip()
    if not spec or spec.lower().startswith("independent"):
        return ()
    edges: list[HierarchyEdge] = []
    for chain in _CHAIN_SEP.split(spec):
        parts = _CHAIN_OP.split(chain)
        roles = [_clean_role_token(p) for p in parts[0::2]]
        ops = parts[1::2]
        for (left, right), op in zip(zip(roles, roles[1:]), ops):
            if not left or not right:
                continue
            kind = EdgeKind.PEER if op == "==" else EdgeKind.DIRECTED
            edge = HierarchyEdge(kind, left, right)
            if edge not in edges:
                edges.append(edge)
    return tuple(edges)


def format_hierarchy(edges: Sequence[HierarchyEdge]) -> str:
    if not edges:
        return "Independent"
    return ", ".join(f"{e.from_role} {'==' if e.kind is EdgeKind.PEER else '>'} {e.to_role}" for e in edges)


def _split_items(text: str) -> list[str]:
    items: list[list[str]] = []
    for line in text.splitlines():
        m = _ITEM_START.match(line)
        if m:
            items.append([m.group(2)])
        elif items:
            items[-1].append(line)
    return [" ".join(part.strip() for part in lines if part.strip()) for lines in items]


def parse_roster(text: str, recruited_round: int = 0) -> RosterParse:
    """Parse ``N. Role - Description - Hierarchy: <spec>`` items.

    Items that do not have at least a role and a description are dropped with
    a warning. Later duplicates of a normalized role are dropped too.
    """
    if SKIP_SENTINEL in (text or "").lower():
        return RosterParse(skipped=True)
    warnings: list[str] = []
    experts: list[ExpertSpec] = []
    seen: set[str] = set()
    for item in _split_items(text or ""):
        body = item
        edges: tuple[HierarchyEdge, ...] = ()
        h = _HIERARCHY.search(body)
        if h:
            edges = parse_hierarchy(h.group(1))
            body = body[: h.start()].rstrip(" -\u2013\u2014*")
        sep = _ROLE_SEP.search(body)
        if not sep:
            warnings.append(f"dropped item without a role/description separator: {item[:60]!r}")
            continue
        role = _clean_role_token(body[: sep.start()])
        scope = _strip_markup(body[sep.end():]).strip()
        if not role or not scope:
            warnings.append(f"dropped item with empty role or description: {item[:60]!r}")
            continue
        try:
            key = normalize_role(role)
        except InvalidRoleError:
            warnings.append(f"dropped item with invalid role: {item[:60]!r}")
            continue
        if key in seen:
            warnings.append(f"dropped duplicate expert {role!r}")
            continue
        if not h:
            warnings.append(f"no hierarchy clause for {role!r}; treating as independent")
        seen.add(key)
        experts.append(ExpertSpec(role, scope, edges, recruited_round))
    if not experts:
        raise EmptyRosterError(f"no experts could be parsed from reply: {text[:120]!r}")
    return RosterParse(tuple(experts), False, tuple(warnings))


def format_roster(experts: Sequence[ExpertSpec]) -> str:
    """Inverse of :func:`parse_roster` up to role normalization."""
    return "\n".join(
        f"{i}. {e.role} - {e.scope} - Hierarchy: {format_hierarchy(e.edges)}" for i, e in enumerate(experts, 1)
    )


# --------------------------------------------------------------------------
# yes/no signals

_CAPWORDS = r"[A-Z][\w/&'()-]*(?:\s+(?:of|and|for|in|&)?\s*[A-Z(][\w/&'()-]*)*"
_ROLE_PATTERNS = [
    # "A Pathologist is needed", "an Oncology Nurse would be helpful"
    re.compile(rf"\b(?:[Aa]n?|[Tt]he)\s+({_CAPWORDS})\s+(?:is|would be|are)\s+(?:needed|required|necessary|recommended|helpful|warranted)"),
    # "needs Pathologist", "need a Radiologist"
    re.compile(rf"\bneed(?:s|ed)?\s+(?:an?\s+|the\s+)?(?:input\s+from\s+(?:an?\s+)?)?({_CAPWORDS})"),
    # "Type of expert needed: Radiologist"
    re.compile(r"(?i:type of expert(?: needed)?|expert needed|specialist needed)\s*[:\-\u2013\u2014]\s*(?:an?\s+)?([^\n.,;]+)"),
    # "recommend/consult a Hepatologist"
    re.compile(rf"\b(?:recommend|consult|involve|add|recruit)(?:ing)?\s+(?:an?\s+|the\s+)?({_CAPWORDS})"),
]
_ROLE_LINE = re.compile(r"^\s*(?:[-*•]|\d+[.)])?\s*\**([A-Z][^\n:\u2013\u2014]*?)\**\s+(?:-|\u2013|\u2014|:)\s+\S")
_NOT_ROLES = {"yes", "no", "reason", "the team", "however", "because", "i", "we"}


def _add_role(found: list[str], raw: str) -> None:
    role = _clean_role_token(raw)
    if not role or role.lower() in _NOT_ROLES or len(role) > 80:
        return
    try:
        key = normalize_role(role)
    except InvalidRoleError:
        return
    if all(normalize_role(r) != key for r in found):
        found.append(role)


def _scan_token(text: str) -> tuple[str | None, int]:
    m = _YES_NO.search(text or "")
    if not m:
        return None, -1
    return m.group(1).lower(), m.end()


def parse_yes_no(text: str) -> KgSignal:
    """Knowledge-gap reply. Ambiguous text fails closed: no gap."""
    token, end = _scan_token(text)
    if token is None:
        return KgSignal(False, warnings=("ambiguous knowledge-gap reply: no yes/no token",))
    if token == "no":
        return KgSignal(False)
    rest = text[end:]
    found: list[str] = []
    for line in rest.splitlines():
        m = _ROLE_LINE.match(line)
        if m:
            _add_role(found, m.group(1))
    for pat in _ROLE_PATTERNS:
        for m in pat.finditer(rest):
            _add_role(found, m.group(1))
    reason = rest.strip(" .,:;-\u2013\u2014\n") or None
    return KgSignal(True, tuple(found), reason)


def parse_consensus(text: str) -> ConsensusSignal:
    """Interaction reply. Ambiguous text fails open: keep discussing."""
    token, _ = _scan_token(text)
    if token is None:
        return ConsensusSignal(True, ambiguous=True)
    return ConsensusSignal(token == "yes")


# --------------------------------------------------------------------------
# final answers

_ANSWER_LINE = re.compile(r"answer\s*\**\s*:\s*\**\s*\(\s*([A-Za-z])\s*\)", re.IGNORECASE)
_PAREN_LABEL = re.compile(r"\(\s*([A-Z])\s*\)")
_BARE_LABEL = re.compile(r"(?<![\w'’])([A-Z])(?![\w'’])")


def parse_final_answer(text: str, labels: Sequence[str]) -> str:
    """Last ``Answer: (L)`` wins; falls back to the last parenthesized or bare label."""
    if not labels:
        raise ValueError("labels must be non-empty")
    allowed = set(labels)
    text = text or ""
    hits = [m.group(1).upper() for m in _ANSWER_LINE.finditer(text) if m.group(1).upper() in allowed]
    if hits:
        return hits[-1]
    for pattern in (_PAREN_LABEL, _BARE_LABEL):
        hits = [m.group(1) for m in pattern.finditer(text) if m.group(1) in allowed]
        if hits:
            return hits[-1]
    raise UnparseableAnswerError(f"no answer label among {sorted(allowed)} in reply: {text[:120]!r}")


__all__ = [
    "ConsensusSignal",
    "KgSignal",
    "RosterParse",
    "SKIP_SENTINEL",
    "format_hierarchy",
    "format_roster",
    "parse_consensus",
    "parse_final_answer",
    "parse_hierarchy",
    "parse_roster",
    "parse_yes_no",
]
