"""Knowledge-driven adaptive consultation loop and the baseline strategies.

One :class:`Consultation` runs one case strictly sequentially:

    recruit_initial -> initial_assessment ->
    loop { discussion_round; detect_knowledge_gap;
           if gap { recruit_additional; onboard_new_experts };
           update_opinions }
    until consensus, a standing gap, or the round cap -> finalize
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol, Sequence

from . import prompts
from .core import (
    ABSTAIN,
    CaseRecord,
    DiscussionState,
    ExpertSpec,
    Message,
    Method,
    OpinionBoard,
    OpinionEntry,
    RunConfig,
    Speaker,
    Strategy,
    UsageLedger,
    Verdict,
    normalize_role,
)
from .errors import EmptyRosterError, GatewayError, UnparseableAnswerError, ValidationError
from .gateway import CacheKey, ChatReply, ChatRequest, Gateway, Phase
from .parsing import KgSignal, parse_consensus, parse_final_answer, parse_roster, parse_yes_no
from .prompts import TemplateId

logger = logging.getLogger(__name__)

RECRUITER = "Recruiter"
MODERATOR = "Moderator"
SINGLE_AGENT = "Medical Expert"

REASK_PROMPT = (
    "Your previous reply could not be read as a list of experts. "
    "Reply again using exactly the numbered format shown above: "
    "'1. Role - Description - Hierarchy: Independent'."
)


@dataclass(frozen=True)
class CallRecord:
    key: CacheKey
    digest: str
    reply: ChatReply

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key.to_dict(), "digest": self.digest, "reply": self.reply.to_dict(), "cached": self.reply.cached}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CallRecord":
        reply = replace(ChatReply.from_dict(data["reply"]), cached=bool(data.get("cached", False)))
        return cls(CacheKey.from_dict(data["key"]), data["digest"], reply)


@dataclass(frozen=True)
class KgRecord:
    round: int
    gap: bool
    requested_roles: tuple[str, ...] = ()
    recruited: tuple[str, ...] = ()
    skipped: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "gap": self.gap,
            "requested_roles": list(self.requested_roles),
            "recruited": list(self.recruited),
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KgRecord":
        return cls(
            int(data["round"]),
            bool(data["gap"]),
            tuple(data.get("requested_roles", ())),
            tuple(data.get("recruited", ())),
            bool(data.get("skipped", False)),
        )


@dataclass(frozen=True)
class CaseRunResult:
    case_id: str
    method: Method
    verdict: Verdict
    ledger: UsageLedger
    transcript: tuple[Message, ...]
    roster_timeline: tuple[tuple[int, tuple[str, ...]], ...]
    rounds_used: int
    consensus_reached: bool
    roster: tuple[ExpertSpec, ...] = ()
    calls: tuple[CallRecord, ...] = ()
    kg_log: tuple[KgRecord, ...] = ()
    status: str = "ok"  # ok | abstained | failed | error
    error: str | None = None
    warnings: tuple[str, ...] = ()

    @property
    def final_roles(self) -> list[str]:
        return [e.role for e in self.roster]

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "method": self.method.value,
            "verdict": self.verdict.to_dict(),
            "ledger": self.ledger.to_dict(),
            "transcript": [m.to_dict() for m in self.transcript],
            "roster_timeline": [{"round": r, "added": list(roles)} for r, roles in self.roster_timeline],
            "rounds_used": self.rounds_used,
            "consensus_reached": self.consensus_reached,
            "roster": [e.to_dict() for e in self.roster],
            "calls": [c.to_dict() for c in self.calls],
            "kg_log": [k.to_dict() for k in self.kg_log],
            "status": self.status,
            "error": self.error,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CaseRunResult":
        return cls(
            case_id=data["case_id"],
            method=Method(data["method"]),
            verdict=Verdict.from_dict(data["verdict"]),
            ledger=UsageLedger.from_dict(data["ledger"]),
            transcript=tuple(Message.from_dict(m) for m in data["transcript"]),
            roster_timeline=tuple((int(t["round"]), tuple(t["added"])) for t in data["roster_timeline"]),
            rounds_used=int(data["rounds_used"]),
            consensus_reached=bool(data["consensus_reached"]),
            roster=tuple(ExpertSpec.from_dict(e) for e in data.get("roster", ())),
            calls=tuple(CallRecord.from_dict(c) for c in data.get("calls", ())),
            kg_log=tuple(KgRecord.from_dict(k) for k in data.get("kg_log", ())),
            status=data.get("status", "ok"),
            error=data.get("error"),
            warnings=tuple(data.get("warnings", ())),
        )


class ResultSink(Protocol):
    def save_result(self, result: CaseRunResult, case: CaseRecord, config: RunConfig) -> None: ...


def majority_label(per_agent: Mapping[str, str]) -> tuple[str, dict[str, int]]:
    """Plurality over ``per_agent`` (insertion order = roster order).

    Ties go to the label voted by the earliest agent in roster order.
    Returns ``(ABSTAIN, {})`` when nobody voted.
    """
    tally = Counter(per_agent.values())
    if not tally:
        return ABSTAIN, {}
    best = max(tally.values())
    for label in per_agent.values():
        if tally[label] == best:
            return label, {k: tally[k] for k in sorted(tally)}
    raise AssertionError("unreachable")


class Consultation:
    """Per-case execution context: prompts, gateway calls and accounting."""

    def __init__(self, case: CaseRecord, config: RunConfig, gateway: Gateway):
        self.case = case
        self.config = config
        self.gateway = gateway
        self.seq = 0
        self.transcript: list[Message] = []
        self.calls: list[CallRecord] = []
        self.warnings: list[str] = []
        self.recruiter_history: tuple[Message, ...] = ()
        self.live_calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    # -- plumbing ---------------------------------------------------------

    def _warn(self, msg: str) -> None:
        logger.warning("%s: %s", self.case.case_id, msg)
        self.warnings.append(msg)

    def _system(self, role: str, round: int, text: str) -> tuple[Message, ...]:
        msg = Message(Speaker.SYSTEM, round, text, role)
        self.transcript.append(msg)
        return (msg,)

    def ask(
        self,
        role: str,
        phase: Phase,
        round: int,
        history: tuple[Message, ...],
        user_text: str,
        attachments: Sequence[str] = (),
    ) -> tuple[str, tuple[Message, ...]]:
        """Send ``history + user_text`` and return ``(reply, extended history)``."""
        user = Message(Speaker.USER, round, user_text, role)
        messages = history + (user,)
        key = CacheKey(self.case.case_id, role, phase, round, self.seq)
        self.seq += 1
        request = ChatRequest(self.config.model_id, self.config.temperature, messages, key, tuple(attachments))
        reply = self.gateway.chat(request)
        self.calls.append(CallRecord(key, request.digest(), reply))
        if not reply.cached:
            self.live_calls += 1
        self.prompt_tokens += reply.prompt_tokens
        self.completion_tokens += reply.completion_tokens
        speaker = Speaker.MODERATOR if phase is Phase.MODERATE else Speaker.AGENT
        answer = Message(speaker, round, reply.content, role)
        self.transcript.extend((user, answer))
        return reply.content, messages + (answer,)

    def _history(self, state: DiscussionState, expert: ExpertSpec) -> tuple[Message, ...]:
        return state.histories[expert.key]

    def _board_text(self, board: OpinionBoard) -> str:
        return prompts.render_board(board, self.config.opinion_char_budget)

    # -- initial consultation ----------------------------------------------

    def recruit_initial(self, n: int) -> tuple[ExpertSpec, ...]:
        tid = TemplateId.P1_STRICT if self.config.prompt_variant == "progn_strict" else TemplateId.P1
        system, user = prompts.render(tid, {"question": prompts.format_question(self.case), "num_agents": n})
        history = self._system(RECRUITER, 0, system or "")
        reply, history = self.ask(RECRUITER, Phase.RECRUIT_INITIAL, 0, history, user)
        parsed = None
        try:
            parsed = parse_roster(reply)
        except EmptyRosterError:
            pass
        if parsed is None or parsed.skipped:
            self._warn("initial recruitment reply had no experts; re-asking once")
            reply, history = self.ask(RECRUITER, Phase.RECRUIT_INITIAL, 0, history, REASK_PROMPT)
            parsed = parse_roster(reply)  # EmptyRosterError propagates: case failed
            if parsed.skipped:
                raise EmptyRosterError("recruiter declined to recruit any expert")
        self.recruiter_history = history
        for w in parsed.warnings:
            self._warn(w)
        experts = parsed.experts
        if len(experts) > n:
            self._warn(f"recruiter named {len(experts)} experts, keeping the first {n}")
            experts = experts[:n]
        elif len(experts) < n:
            self._warn(f"recruiter named {len(experts)} experts, fewer than the requested {n}")
        return experts

    def _open_histories(self, state: DiscussionState, experts: Sequence[ExpertSpec], round: int) -> dict[str, tuple[Message, ...]]:
        histories = dict(state.histories)
        for e in experts:
            histories[e.key] = self._system(e.role, round, prompts.render_role_system(e))
        return histories

    def _assess(self, state: DiscussionState, experts: Sequence[ExpertSpec], round: int, context: str) -> DiscussionState:
        histories = self._open_histories(state, experts, round)
        attachments = (self.case.image_ref,) if self.case.image_ref else ()
        opinions = []
        for e in experts:
            text = prompts.assessment_prompt(e, self.case, context)
            reply, histories[e.key] = self.ask(e.role, Phase.ASSESS, round, histories[e.key], text, attachments)
            opinions.append(OpinionEntry(e.role, reply, round, "assess"))
        return replace(state, board=state.board.extend(opinions), histories=histories)

    def initial_assessment(self, state: DiscussionState) -> DiscussionState:
        if not state.roster:
            raise ValidationError("initial assessment needs a non-empty roster")
        return self._assess(state, state.roster, 0, "")

    # -- collaborative discussion ------------------------------------------

    def discussion_round(self, state: DiscussionState, members: Sequence[ExpertSpec] | None = None) -> DiscussionState:
        """P3 exchange; consensus means every member declines further talk."""
        members = state.roster if members is None else members
        r = state.round_r
        board = state.board
        histories = dict(state.histories)
        agree = True
        for e in members:
            _, text = prompts.render(TemplateId.P3, {"assessment": self._board_text(board)})
            reply, histories[e.key] = self.ask(e.role, Phase.INTERACT, r, histories[e.key], text)
            signal = parse_consensus(reply)
            if signal.ambiguous:
                self._warn(f"round {r}: {e.role} gave no yes/no on further discussion; treating as yes")
            agree = agree and not signal.wants_more_talk
            board = board.add(e.role, reply, r, "interact")
        return replace(state, board=board, histories=histories, consensus=agree)

    def detect_knowledge_gap(self, state: DiscussionState) -> tuple[DiscussionState, KgSignal]:
        if not state.roster:
            raise ValidationError("knowledge-gap detection needs a non-empty roster")
        r = state.round_r
        _, text = prompts.render(TemplateId.P4, {"agents": prompts.agents_line(state.roster)})
        histories = dict(state.histories)
        gap = False
        requested: list[str] = []
        reasons: list[str] = []
        warnings: list[str] = []
        for e in state.roster:
            reply, histories[e.key] = self.ask(e.role, Phase.KG_DETECT, r, histories[e.key], text)
            sig = parse_yes_no(reply)
            warnings.extend(f"round {r}: {e.role}: {w}" for w in sig.warnings)
            if sig.gap:
                gap = True
                if sig.reason:
                    reasons.append(f"{e.role}: {sig.reason}")
                for role in sig.requested_roles:
                    if all(normalize_role(role) != normalize_role(x) for x in requested):
                        requested.append(role)
        for w in warnings:
            self._warn(w)
        signal = KgSignal(gap, tuple(requested), "\n".join(reasons) or None, tuple(warnings))
        return replace(state, histories=histories, kg=gap), signal

    def recruit_additional(self, state: DiscussionState) -> tuple[ExpertSpec, ...]:
        r = state.round_r
        agents = prompts.agents_line(state.roster)
        _, text = prompts.render(TemplateId.P5, {"agents": agents, "assessment": self._board_text(state.board)})
        reply, self.recruiter_history = self.ask(RECRUITER, Phase.RECRUIT_MORE, r, self.recruiter_history, text)
        try:
            parsed = parse_roster(reply, recruited_round=r)
        except EmptyRosterError:
            self._warn(f"round {r}: recruitment reply had no experts; treating as skip")
            return ()
        if parsed.skipped:
            return ()
        for w in parsed.warnings:
            self._warn(f"round {r}: {w}")
        fresh = []
        for e in parsed.experts:
            if state.has_role(e.role):
                self._warn(f"round {r}: {e.role} is already on the team; not recruited again")
                continue
            fresh.append(e)
        if len(fresh) > self.config.max_new_per_round:
            self._warn(f"round {r}: capping {len(fresh)} recruits at {self.config.max_new_per_round}")
            fresh = fresh[: self.config.max_new_per_round]
        return tuple(fresh)

    def onboard_new_experts(self, state: DiscussionState, new: Sequence[ExpertSpec]) -> DiscussionState:
        """New experts assess with the current board as context, then talk among themselves."""
        if not new:
            raise ValidationError("onboarding needs at least one new expert")
        r = state.round_r
        context = "Discussion so far:\n" + self._board_text(state.board) if state.board.entries else ""
        state = self._assess(state, new, r, context)
        state = self.discussion_round(state, members=new)
        return replace(state, roster=state.roster + tuple(new), kg=False)

    def update_opinions(self, state: DiscussionState) -> DiscussionState:
        r = state.round_r
        question = prompts.format_question(self.case)
        _, text = prompts.render(
            TemplateId.P6,
            {
                "question": question,
                "answer_template": prompts.answer_template(self.case.labels).body,
                "final_answer_template": prompts.final_answer_template(self.case.labels).body,
            },
        )
        histories = dict(state.histories)
        fresh = []
        for e in state.roster:
            reply, histories[e.key] = self.ask(e.role, Phase.UPDATE, r, histories[e.key], text)
            try:
                parse_final_answer(reply, self.case.labels)
            except UnparseableAnswerError:
                self._warn(f"round {r}: {e.role} gave no parseable answer; recorded as abstention")
            fresh.append(OpinionEntry(e.role, reply, r, "update"))
        return replace(state, board=OpinionBoard(tuple(fresh)), histories=histories, round_r=r + 1)

    # -- decision ----------------------------------------------------------

    def collect_answers(self, board: OpinionBoard) -> tuple[dict[str, str], tuple[str, ...]]:
        per_agent: dict[str, str] = {}
        abstained: list[str] = []
        for entry in board.entries:
            try:
                per_agent[entry.role] = parse_final_answer(entry.text, self.case.labels)
            except UnparseableAnswerError:
                abstained.append(entry.role)
        return per_agent, tuple(abstained)

    def finalize(self, state: DiscussionState, strategy: Strategy, moderator: bool = True) -> Verdict:
        per_agent, abstained = self.collect_answers(state.board)
        tally = dict(sorted(Counter(per_agent.values()).items()))
        r = max(state.round_r - 1, 0)
        text = ""
        if moderator:
            tid = TemplateId.P7_REFINE if strategy is Strategy.ENSEMBLE_REFINEMENT else TemplateId.P7
            system, user = prompts.render(
                tid,
                {
                    "assessment": self._board_text(state.board),
                    "final_answer_template": prompts.final_answer_template(self.case.labels).body,
                    "question": prompts.format_question(self.case),
                },
            )
            history = self._system(MODERATOR, r, system or "")
            text, _ = self.ask(MODERATOR, Phase.MODERATE, r, history, user)
        if strategy is Strategy.ENSEMBLE_REFINEMENT:
            try:
                label = parse_final_answer(text, self.case.labels)
            except UnparseableAnswerError:
                self._warn("moderator reply had no parseable answer")
                label = ABSTAIN
        else:
            label, tally = majority_label(per_agent)
        return Verdict(label, strategy, per_agent, tally, text, abstained)

    # -- result ------------------------------------------------------------

    def result(
        self,
        method: Method,
        verdict: Verdict,
        roster: Sequence[ExpertSpec],
        timeline: Sequence[tuple[int, tuple[str, ...]]],
        rounds_used: int,
        consensus: bool,
        started: float,
        kg_log: Sequence[KgRecord] = (),
        status: str | None = None,
        error: str | None = None,
    ) -> CaseRunResult:
        ledger = UsageLedger(
            case_id=self.case.case_id,
            expert_count=len(roster),
            backend_calls=self.live_calls,
            chat_calls=len(self.calls),
            prompt_tokens=self.prompt_tokens,
            completion_tokens=self.completion_tokens,
            wall_time=time.perf_counter() - started,
            monetary_cost=self.config.cost(self.prompt_tokens, self.completion_tokens),
        )
        if status is None:
            status = "abstained" if verdict.is_abstention else "ok"
        return CaseRunResult(
            case_id=self.case.case_id,
            method=method,
            verdict=verdict,
            ledger=ledger,
            transcript=tuple(self.transcript),
            roster_timeline=tuple(timeline),
            rounds_used=rounds_used,
            consensus_reached=consensus,
            roster=tuple(roster),
            calls=tuple(self.calls),
            kg_log=tuple(kg_log),
            status=status,
            error=error,
            warnings=tuple(self.warnings),
        )


def _default_strategy(config: RunConfig) -> Strategy:
    if config.method in (Method.SINGLE, Method.COT):
        return Strategy.SINGLE
    if config.method is Method.STATIC_MAJORITY:
        return Strategy.MAJORITY_VOTE
    return config.consensus_strategy


def _execute(case: CaseRecord, config: RunConfig, gateway: Gateway, store: ResultSink | None, body) -> CaseRunResult:
    session = Consultation(case, config, gateway)
    started = time.perf_counter()
    progress: dict[str, Any] = {"roster": (), "timeline": [], "rounds": 0, "consensus": False, "kg": []}
    try:
        result = body(session, started, progress)
    except GatewayError as exc:
        if store is not None:
            partial = session.result(
                config.method,
                Verdict(ABSTAIN, _default_strategy(config)),
                progress["roster"],
                progress["timeline"],
                progress["rounds"],
                progress["consensus"],
                started,
                progress["kg"],
                status="error",
                error=f"{type(exc).__name__}: {exc}",
            )
            store.save_result(partial, case, config)
        raise
    if store is not None:
        store.save_result(result, case, config)
    return result


def _failed(session: Consultation, config: RunConfig, started: float, exc: Exception) -> CaseRunResult:
    return session.result(
        config.method,
        Verdict(ABSTAIN, _default_strategy(config)),
        (),
        (),
        0,
        False,
        started,
        status="failed",
        error=f"{type(exc).__name__}: {exc}",
    )


def run_case(case: CaseRecord, config: RunConfig, gateway: Gateway, store: ResultSink | None = None) -> CaseRunResult:
    """Run the adaptive consultation on one case."""

    def body(s: Consultation, started: float, progress: dict[str, Any]) -> CaseRunResult:
        R = config.max_rounds_R
        try:
            roster = s.recruit_initial(config.initial_experts_N)
        except EmptyRosterError as exc:
            return _failed(s, config, started, exc)
        state = DiscussionState(round_r=1, roster=roster)
        timeline = [(0, tuple(e.role for e in roster))]
        progress.update(roster=roster, timeline=timeline)
        kg_log: list[KgRecord] = []
        progress["kg"] = kg_log
        state = s.initial_assessment(state)
        while state.round_r <= R and not state.consensus and not state.kg:
            r = state.round_r
            state = s.discussion_round(state)
            state, signal = s.detect_knowledge_gap(state)
            record = KgRecord(r, signal.gap, signal.requested_roles)
            if state.kg and config.allow_recruitment:
                new = s.recruit_additional(state)
                if new:
                    state = s.onboard_new_experts(state, new)
                    timeline.append((r, tuple(e.role for e in new)))
                    progress["roster"] = state.roster
                record = replace(record, recruited=tuple(e.role for e in new), skipped=not new)
                state = replace(state, kg=False)
            kg_log.append(record)
            state = s.update_opinions(state)
            progress.update(rounds=state.round_r - 1, consensus=state.consensus)
        verdict = s.finalize(state, config.consensus_strategy)
        return s.result(config.method, verdict, state.roster, timeline, state.round_r - 1, state.consensus, started, kg_log)

    if config.method is not Method.KAMAC:
        return run_baseline(case, config, gateway, store)
    return _execute(case, config, gateway, store, body)


def run_baseline(case: CaseRecord, config: RunConfig, gateway: Gateway, store: ResultSink | None = None) -> CaseRunResult:
    """single / cot / static_majority / static_consensus."""
    method = config.method
    if method is Method.KAMAC:
        raise ValidationError("run_baseline does not run the adaptive method; use run_case")

    def single(s: Consultation, started: float, progress: dict[str, Any]) -> CaseRunResult:
        system, user = prompts.render(
            TemplateId.SINGLE,
            {
                "question": prompts.format_question(case),
                "cot_instruction": prompts.COT_INSTRUCTION if method is Method.COT else "",
                "answer_template": prompts.answer_template(case.labels).body,
            },
        )
        history = s._system(SINGLE_AGENT, 0, system or "")
        attachments = (case.image_ref,) if case.image_ref else ()
        reply, _ = s.ask(SINGLE_AGENT, Phase.ASSESS, 0, history, user, attachments)
        try:
            label = parse_final_answer(reply, case.labels)
            per_agent, abstained = {SINGLE_AGENT: label}, ()
        except UnparseableAnswerError:
            label, per_agent, abstained = ABSTAIN, {}, (SINGLE_AGENT,)
        verdict = Verdict(label, Strategy.SINGLE, per_agent, {label: 1} if per_agent else {}, "", abstained)
        expert = ExpertSpec(SINGLE_AGENT, "answers medical questions")
        return s.result(method, verdict, (expert,), [(0, (SINGLE_AGENT,))], 0, False, started)

    def static(s: Consultation, started: float, progress: dict[str, Any]) -> CaseRunResult:
        try:
            roster = s.recruit_initial(config.static_team_size)
        except EmptyRosterError as exc:
            return _failed(s, config, started, exc)
        timeline = [(0, tuple(e.role for e in roster))]
        progress.update(roster=roster, timeline=timeline)
        state = s.initial_assessment(DiscussionState(round_r=1, roster=roster))
        if method is Method.STATIC_MAJORITY:
            verdict = s.finalize(state, Strategy.MAJORITY_VOTE, moderator=False)
            return s.result(method, verdict, roster, timeline, 0, False, started)
        while state.round_r <= config.max_rounds_R and not state.consensus:
            state = s.discussion_round(state)
            state = s.update_opinions(state)
            progress.update(rounds=state.round_r - 1, consensus=state.consensus)
        verdict = s.finalize(state, config.consensus_strategy)
        return s.result(method, verdict, roster, timeline, state.round_r - 1, state.consensus, started)

    body = single if method in (Method.SINGLE, Method.COT) else static
    return _execute(case, config, gateway, store, body)


def call_count(initial: int, rounds: Sequence[tuple[int, int | None]], moderator: bool = True, reasks: int = 0) -> int:
    """Closed-form number of chat calls of one adaptive run.

    ``rounds`` holds, per discussion round, the roster size at the start of
    the round and the number of experts recruited (``None`` when no
    recruitment prompt was issued, 0 for a skipped recruitment).
    P1 + N*P2 + per round |roster|*(P3 + P4) + [P5 + |new|*(P2 + P3)] + |roster'|*P6, then P7.
    """
    total = 1 + reasks + initial
    for size, recruited in rounds:
        total += 2 * size
        if recruited is not None:
            total += 1 + 2 * recruited
        total += size + (recruited or 0)
    return total + (1 if moderator else 0)


def worst_case_calls(config: RunConfig) -> int:
    """Upper bound on chat calls for any backend behaviour."""
    n, R, m = config.initial_experts_N, config.max_rounds_R, config.max_new_per_round
    return call_count(n, [(n + (r - 1) * m, m) for r in range(1, R + 1)], moderator=True, reasks=1)
