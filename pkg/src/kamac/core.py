"""Domain types shared across the engine.

Everything here is an immutable value object with construction-time
validation and a ``to_dict``/``from_dict`` pair used by the transcript and
cache documents.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .errors import EmptyInputError, InvalidRoleError, ValidationError

ABSTAIN = "∅"

_WS = re.compile(r"\s+")


def clean_role(raw: str) -> str:
    """Trim and collapse whitespace, keeping the original casing for display."""
    return _WS.sub(" ", raw or "").strip()


def normalize_role(raw: str) -> str:
    """Identity form of a role name: trimmed, whitespace-collapsed, case-folded.

    Parenthetical qualifiers are part of the identity, so
    ``"Surgical Oncologist (Recurrence/Secondary Cancers)"`` and
    ``"Surgical Oncologist"`` are different experts.
    """
    role = clean_role(raw).casefold()
    if not role:
        raise InvalidRoleError(f"role name is empty after normalization: {raw!r}")
    return role


class Modality(str, Enum):
    TEXT_ONLY = "text_only"
    TEXT_WITH_IMAGE = "text_with_image"


class Speaker(str, Enum):
    SYSTEM = "system"
    USER = "user"
    AGENT = "agent"
    MODERATOR = "moderator"


class Strategy(str, Enum):
    MAJORITY_VOTE = "majority_vote"
    ENSEMBLE_REFINEMENT = "ensemble_refinement"
    SINGLE = "single"


class Method(str, Enum):
    KAMAC = "kamac"
    SINGLE = "single"
    COT = "cot"
    STATIC_MAJORITY = "static_majority"
    STATIC_CONSENSUS = "static_consensus"


class EdgeKind(str, Enum):
    PEER = "peer"
    DIRECTED = "directed"


@dataclass(frozen=True)
class Box3D:
    z_min: float
    z_max: float
    y_min: float
    y_max: float
    x_min: float
    x_max: float

    def __post_init__(self) -> None:
        values = self.as_tuple()
        if any(not isinstance(v, (int, float)) or math.isnan(v) or not 0.0 <= v <= 1.0 for v in values):
            raise ValidationError(f"box coordinates must lie in [0, 1]: {values}")
        for lo, hi, axis in ((self.z_min, self.z_max, "z"), (self.y_min, self.y_max, "y"), (self.x_min, self.x_max, "x")):
            if lo > hi:
                raise ValidationError(f"{axis}_min > {axis}_max in box {values}")

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.z_min, self.z_max, self.y_min, self.y_max, self.x_min, self.x_max)

    def to_dict(self) -> list[float]:
        return list(self.as_tuple())

    @classmethod
    def from_dict(cls, data: Sequence[float]) -> "Box3D":
        if len(data) != 6:
            raise ValidationError(f"a box needs six coordinates, got {len(data)}")
        return cls(*(float(v) for v in data))


@dataclass(frozen=True)
class HierarchyEdge:
    """A communication link between two roles (stored in normalized form).

    Peer edges are canonical: ``from_role <= to_role``.
    """

    kind: EdgeKind
    from_role: str
    to_role: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EdgeKind(self.kind))
        a, b = normalize_role(self.from_role), normalize_role(self.to_role)
        if self.kind is EdgeKind.PEER and b < a:
            a, b = b, a
        object.__setattr__(self, "from_role", a)
        object.__setattr__(self, "to_role", b)

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind.value, "from": self.from_role, "to": self.to_role}

    @classmethod
    def from_dict(cls, data: Mapping[str, str]) -> "HierarchyEdge":
        return cls(EdgeKind(data["kind"]), data["from"], data["to"])


@dataclass(frozen=True)
class ExpertSpec:
    role: str
    scope: str
    edges: tuple[HierarchyEdge, ...] = ()
    recruited_round: int = 0  # 0 means part of the initial consultation

    def __post_init__(self) -> None:
        role = clean_role(self.role)
        normalize_role(role)
        object.__setattr__(self, "role", role)
        object.__setattr__(self, "scope", clean_role(self.scope))
        object.__setattr__(self, "edges", tuple(self.edges))
        if self.recruited_round < 0:
            raise ValidationError("recruitment round must be >= 0")

    @property
    def key(self) -> str:
        return normalize_role(self.role)

    @property
    def provenance(self) -> str:
        return "initial" if self.recruited_round == 0 else f"recruited({self.recruited_round})"

    def to_dict(self) -> dict[str, Any]:
        prov: dict[str, Any] = {"kind": "initial"}
        if self.recruited_round:
            prov = {"kind": "recruited", "round": self.recruited_round}
        return {
            "role": self.role,
            "scope": self.scope,
            "edges": [e.to_dict() for e in self.edges],
            "provenance": prov,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExpertSpec":
        prov = data.get("provenance") or {"kind": "initial"}
        return cls(
            role=data["role"],
            scope=data.get("scope", ""),
            edges=tuple(HierarchyEdge.from_dict(e) for e in data.get("edges", ())),
            recruited_round=int(prov.get("round", 0)) if prov["kind"] == "recruited" else 0,
        )


@dataclass(frozen=True)
class Message:
    speaker: Speaker
    round: int
    content: str
    role: str | None = None  # agent identity for agent replies, addressee for prompts

    def __post_init__(self) -> None:
        object.__setattr__(self, "speaker", Speaker(self.speaker))
        if self.round < 0:
            raise ValidationError("message round must be >= 0")
        if not self.content:
            raise ValidationError("message content must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"speaker": self.speaker.value, "round": self.round, "content": self.content}
        if self.role is not None:
            out["role"] = self.role
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Message":
        return cls(Speaker(data["speaker"]), int(data["round"]), data["content"], data.get("role"))


@dataclass(frozen=True)
class OpinionEntry:
    role: str
    text: str
    round: int
    phase: str = "assess"

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "text": self.text, "round": self.round, "phase": self.phase}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OpinionEntry":
        return cls(data["role"], data["text"], int(data["round"]), data.get("phase", "assess"))


@dataclass(frozen=True)
class OpinionBoard:
    """Ordered feedback buffer. One entry per (role, round, phase)."""

    entries: tuple[OpinionEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            k = (normalize_role(e.role), e.round, e.phase)
            if k in seen:
                raise ValidationError(f"duplicate opinion for {e.role!r} in round {e.round} ({e.phase})")
            seen.add(k)

    def add(self, role: str, text: str, round: int, phase: str = "assess") -> "OpinionBoard":
        return OpinionBoard(self.entries + (OpinionEntry(role, text, round, phase),))

    def extend(self, entries: Iterable[OpinionEntry]) -> "OpinionBoard":
        return OpinionBoard(self.entries + tuple(entries))

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.entries]

    @classmethod
    def from_dict(cls, data: Iterable[Mapping[str, Any]]) -> "OpinionBoard":
        return cls(tuple(OpinionEntry.from_dict(e) for e in data))


def _check_label(label: str) -> str:
    if not isinstance(label, str) or len(label) != 1 or not label.isupper():
        raise ValidationError(f"option labels must be single uppercase letters, got {label!r}")
    return label


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    stem: str
    options: dict[str, str]
    gold_label: str
    modality: Modality = Modality.TEXT_ONLY
    clinical_vars: dict[str, str] = field(default_factory=dict)
    image_ref: str | None = None
    roi_boxes: tuple[Box3D, ...] | None = None
    fewshot_examplers: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "modality", Modality(self.modality))
        if not self.case_id:
            raise ValidationError("case_id must be non-empty")
        if not self.options:
            raise ValidationError(f"{self.case_id}: options must be non-empty")
        opts = {_check_label(k): v for k, v in self.options.items()}
        object.__setattr__(self, "options", opts)
        object.__setattr__(self, "clinical_vars", dict(self.clinical_vars))
        if self.gold_label not in opts:
            raise ValidationError(f"{self.case_id}: gold label {self.gold_label!r} is not among options {list(opts)}")
        if self.roi_boxes is not None:
            object.__setattr__(self, "roi_boxes", tuple(self.roi_boxes))
            if self.modality is not Modality.TEXT_WITH_IMAGE:
                raise ValidationError(f"{self.case_id}: roi_boxes require modality text_with_image")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.options)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "stem": self.stem,
            "options": dict(self.options),
            "gold_label": self.gold_label,
            "modality": self.modality.value,
            "clinical_vars": dict(self.clinical_vars),
            "image_ref": self.image_ref,
            "roi_boxes": None if self.roi_boxes is None else [b.to_dict() for b in self.roi_boxes],
            "fewshot_examplers": self.fewshot_examplers,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CaseRecord":
        boxes = data.get("roi_boxes")
        return cls(
            case_id=data["case_id"],
            stem=data["stem"],
            options=dict(data["options"]),
            gold_label=data["gold_label"],
            modality=Modality(data.get("modality", "text_only")),
            clinical_vars=dict(data.get("clinical_vars") or {}),
            image_ref=data.get("image_ref"),
            roi_boxes=None if boxes is None else tuple(Box3D.from_dict(b) for b in boxes),
            fewshot_examplers=data.get("fewshot_examplers", ""),
        )


@dataclass(frozen=True)
class DiscussionState:
    round_r: int
    roster: tuple[ExpertSpec, ...]
    consensus: bool = False
    kg: bool = False
    board: OpinionBoard = field(default_factory=OpinionBoard)
    histories: dict[str, tuple[Message, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.round_r < 1:
            raise ValidationError("round_r starts at 1")
        object.__setattr__(self, "roster", tuple(self.roster))

    def roles(self) -> list[str]:
        return [e.role for e in self.roster]

    def has_role(self, role: str) -> bool:
        key = normalize_role(role)
        return any(e.key == key for e in self.roster)


@dataclass(frozen=True)
class Verdict:
    label: str
    strategy: Strategy
    per_agent: dict[str, str] = field(default_factory=dict)
    tally: dict[str, int] = field(default_factory=dict)
    moderator_text: str = ""
    abstained: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "abstained", tuple(self.abstained))

    @property
    def is_abstention(self) -> bool:
        return self.label == ABSTAIN

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "strategy": self.strategy.value,
            "per_agent": dict(self.per_agent),
            "tally": dict(self.tally),
            "moderator_text": self.moderator_text,
            "abstained": list(self.abstained),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Verdict":
        return cls(
            label=data["label"],
            strategy=Strategy(data["strategy"]),
            per_agent=dict(data.get("per_agent") or {}),
            tally={k: int(v) for k, v in (data.get("tally") or {}).items()},
            moderator_text=data.get("moderator_text", ""),
            abstained=tuple(data.get("abstained") or ()),
        )


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")
        object.__setattr__(self, "backoff", tuple(float(b) for b in self.backoff))

    def delay(self, failed_attempt: int) -> float:
        """Pause after the ``failed_attempt``-th failure (1-based); the last entry repeats."""
        if not self.backoff:
            return 0.0
        return self.backoff[min(failed_attempt, len(self.backoff)) - 1]


@dataclass(frozen=True)
class RunConfig:
    model_id: str = "gpt-4.1-mini"
    temperature: float = 0.0
    max_rounds_R: int = 3
    initial_experts_N: int = 1
    consensus_strategy: Strategy = Strategy.MAJORITY_VOTE
    method: Method = Method.KAMAC
    static_team_size: int = 5
    cache_dir: str | None = None
    concurrency_limit: int = 1
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    prompt_variant: str = "medqa"
    max_new_per_round: int = 3
    allow_recruitment: bool = True
    opinion_char_budget: int | None = None
    price_per_million: tuple[float, float] = (0.0, 0.0)  # (prompt, completion)

    def __post_init__(self) -> None:
        object.__setattr__(self, "consensus_strategy", Strategy(self.consensus_strategy))
        object.__setattr__(self, "method", Method(self.method))
        if self.max_rounds_R < 1:
            raise ValidationError("max_rounds_R must be >= 1")
        if self.initial_experts_N < 1:
            raise ValidationError("initial_experts_N must be >= 1")
        if self.static_team_size < 1:
            raise ValidationError("static_team_size must be >= 1")
        if self.concurrency_limit < 1:
            raise ValidationError("concurrency_limit must be >= 1")
        if self.max_new_per_round < 1:
            raise ValidationError("max_new_per_round must be >= 1")
        if self.prompt_variant not in ("medqa", "progn_strict"):
            raise ValidationError(f"unknown prompt variant {self.prompt_variant!r}")
        object.__setattr__(self, "price_per_million", tuple(float(p) for p in self.price_per_million))

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        p, c = self.price_per_million
        return (prompt_tokens * p + completion_tokens * c) / 1e6

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_rounds_R": self.max_rounds_R,
            "initial_experts_N": self.initial_experts_N,
            "consensus_strategy": self.consensus_strategy.value,
            "method": self.method.value,
            "static_team_size": self.static_team_size,
            "cache_dir": self.cache_dir,
            "concurrency_limit": self.concurrency_limit,
            "retry_policy": {"max_attempts": self.retry_policy.max_attempts, "backoff": list(self.retry_policy.backoff)},
            "prompt_variant": self.prompt_variant,
            "max_new_per_round": self.max_new_per_round,
            "allow_recruitment": self.allow_recruitment,
            "opinion_char_budget": self.opinion_char_budget,
            "price_per_million": list(self.price_per_million),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        kw = dict(data)
        rp = kw.pop("retry_policy", None)
        if rp is not None:
            kw["retry_policy"] = RetryPolicy(int(rp["max_attempts"]), tuple(rp["backoff"]))
        if "price_per_million" in kw:
            kw["price_per_million"] = tuple(kw["price_per_million"])
        return cls(**kw)


@dataclass(frozen=True)
class UsageLedger:
    case_id: str
    expert_count: int
    backend_calls: int  # live calls only; cache hits are excluded
    chat_calls: int = 0  # every chat invocation, cached or not
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_time: float = 0.0
    monetary_cost: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "expert_count": self.expert_count,
            "backend_calls": self.backend_calls,
            "chat_calls": self.chat_calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "wall_time": self.wall_time,
            "monetary_cost": self.monetary_cost,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UsageLedger":
        return cls(**dict(data))


@dataclass(frozen=True)
class LedgerSummary:
    n_cases: int
    mean_experts: float
    mean_backend_calls: float
    mean_chat_calls: float
    mean_wall_time: float
    total_cost: float
    total_prompt_tokens: int
    total_completion_tokens: int


def ledger_merge(ledgers: Sequence[UsageLedger]) -> LedgerSummary:
    if not ledgers:
        raise EmptyInputError("cannot merge an empty list of ledgers")
    n = len(ledgers)
    return LedgerSummary(
        n_cases=n,
        mean_experts=sum(l.expert_count for l in ledgers) / n,
        mean_backend_calls=sum(l.backend_calls for l in ledgers) / n,
        mean_chat_calls=sum(l.chat_calls for l in ledgers) / n,
        mean_wall_time=sum(l.wall_time for l in ledgers) / n,
        total_cost=sum(l.monetary_cost for l in ledgers),
        total_prompt_tokens=sum(l.prompt_tokens for l in ledgers),
        total_completion_tokens=sum(l.completion_tokens for l in ledgers),
    )
