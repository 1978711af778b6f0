"""Command line entry point: ``kamac run|report|stats|inspect|prompt``.

This is the only module that reads environment variables.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import prompts
from ._fsutil import safe_name
from .core import ABSTAIN, Method, RetryPolicy, RunConfig, Speaker, Strategy
from .datasets import PROFILES, TranscriptStore, load_dataset
from .errors import DatasetError, EmptyInputError, GatewayError, KamacError, TranscriptError, UnboundPlaceholderError
from .evaluation import (
    ResultRow,
    confusion,
    expert_histogram,
    metrics,
    overlap,
    read_results,
    render_table,
    t_test,
    usage_summary,
    write_results,
)
from .gateway import Gateway, RemoteBackend, ReplyCache, ScriptedBackend
from .orchestrator import CaseRunResult, run_case
from .prompts import TemplateId

log = logging.getLogger("kamac")

API_KEY_ENV = "OPENAI_API_KEY"
BASE_URL_ENV = "OPENAI_BASE_URL"

METHODS = {
    "kamac": Method.KAMAC,
    "single": Method.SINGLE,
    "cot": Method.COT,
    "majority": Method.STATIC_MAJORITY,
    "consensus": Method.STATIC_CONSENSUS,
}
STRATEGIES = {"vote": Strategy.MAJORITY_VOTE, "refine": Strategy.ENSEMBLE_REFINEMENT}
METRIC_NAMES = ("acc", "prec", "spec", "recall", "avg")

_emit_lock = threading.Lock()


def _emit(stream, text: str) -> None:
    with _emit_lock:
        stream.write(text + "\n")
        stream.flush()


def _error_record(**fields) -> None:
    _emit(sys.stderr, json.dumps(fields, ensure_ascii=False, sort_keys=True))


# --------------------------------------------------------------------------
# run


def cache_root(cache_dir: str | Path, dataset: str | Path, method: Method) -> Path:
    return Path(cache_dir) / Path(dataset).stem / method.value


def _cases_table(results: Sequence[CaseRunResult], golds: dict[str, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["case_id", "gold", "pred", "status", "experts", "chat_calls", "rounds_used", "consensus"])
    for r in results:
        w.writerow(
            [
                r.case_id,
                golds[r.case_id],
                r.verdict.label,
                r.status,
                r.ledger.expert_count,
                r.ledger.chat_calls,
                r.rounds_used,
                int(r.consensus_reached),
            ]
        )
    return buf.getvalue()


def cmd_run(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    profile = PROFILES[args.profile]
    method = METHODS[args.method]
    if not Path(args.dataset).is_file():
        parser.error(f"dataset file not found: {args.dataset}")
    if args.mock_script and not Path(args.mock_script).is_file():
        parser.error(f"mock script not found: {args.mock_script}")
    api_key = os.environ.get(API_KEY_ENV)
    if not args.mock_script and not api_key:
        parser.error(f"set {API_KEY_ENV} for live runs, or pass --mock-script for an offline run")

    try:
        cases = load_dataset(args.dataset, profile)
    except (DatasetError, OSError) as exc:
        _error_record(event="dataset_error", error=str(exc))
        return 1
    if args.limit is not None:
        cases = cases[: args.limit]
    if not cases:
        _error_record(event="dataset_error", error="no cases to run")
        return 1

    config = RunConfig(
        model_id=args.model,
        temperature=args.temperature,
        max_rounds_R=args.rounds,
        initial_experts_N=args.initial_experts,
        consensus_strategy=STRATEGIES[args.consensus],
        method=method,
        static_team_size=args.team_size,
        cache_dir=str(args.cache_dir),
        concurrency_limit=args.concurrency,
        retry_policy=RetryPolicy(args.max_attempts),
        prompt_variant=profile.prompt_variant,
        price_per_million=(args.price_prompt, args.price_completion),
    )
    root = cache_root(args.cache_dir, args.dataset, method)
    if args.mock_script:
        backend = ScriptedBackend.from_file(args.mock_script)
    else:
        backend = RemoteBackend(api_key, args.base_url or os.environ.get(BASE_URL_ENV) or RemoteBackend.DEFAULT_BASE_URL)
    gateway = Gateway(backend, ReplyCache(root), config.retry_policy)
    store = TranscriptStore(root)

    def work(case) -> CaseRunResult:
        try:
            result = run_case(case, config, gateway, store)
        except GatewayError as exc:
            _error_record(event="case_error", case_id=case.case_id, status="error", error=f"{type(exc).__name__}: {exc}")
            return store.load(case.case_id).result
        if result.status != "ok":
            _error_record(event="case_" + result.status, case_id=case.case_id, status=result.status, error=result.error)
        return result

    with ThreadPoolExecutor(max_workers=config.concurrency_limit) as pool:
        results = list(pool.map(work, cases))

    golds = {c.case_id: c.gold_label for c in cases}
    preds = {r.case_id: (None if r.verdict.label == ABSTAIN else r.verdict.label) for r in results}
    labels = list(profile.option_labels) if profile.averaging == "binary" else None
    counts = confusion(preds, golds, labels)
    row_metrics = metrics(counts, profile.averaging, profile.positive_label)
    ledgers = [r.ledger for r in results]
    summary = usage_summary(ledgers)
    failed = sum(r.status != "ok" for r in results)
    row = ResultRow.build(
        metric=row_metrics,
        summary=summary,
        method=args.method,
        dataset=Path(args.dataset).stem,
        profile=profile.name,
        model=config.model_id,
        n_cases=len(cases),
        failed=failed,
        averaging=profile.averaging,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(out, [row])
    Path(str(out) + ".cases.tsv").write_text(_cases_table(results, golds), encoding="utf-8")
    usage = {
        "live_backend_calls": sum(l.backend_calls for l in ledgers),
        "cache_hits": gateway.cache_hits,
        "mean_backend_calls": summary.mean_backend_calls,
        "mean_wall_time": summary.mean_wall_time,
    }
    Path(str(out) + ".usage.json").write_text(json.dumps(usage, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    _emit(sys.stdout, f"# averaging: {profile.averaging}" + (f" (positive label {profile.positive_label})" if profile.positive_label else ""))
    _emit(sys.stdout, render_table([row]))
    _emit(
        sys.stdout,
        f"cases {len(cases)}  failed {failed}  experts/case {summary.mean_experts:.2f}  "
        f"calls/case {summary.mean_chat_calls:.2f}  backend calls {usage['live_backend_calls']}  "
        f"cache hits {gateway.cache_hits}  time/case {summary.mean_wall_time:.2f}s  cost {summary.total_cost:.4f}",
    )
    for flag in row_metrics.flags:
        log.warning("metric flag: %s", flag)
    return 1 if failed else 0


# --------------------------------------------------------------------------
# report


def _load_results_dir(path: Path) -> list[CaseRunResult]:
    out = []
    for p in sorted(path.rglob("*.transcript.json")):
        case_id = json.loads(p.read_text(encoding="utf-8"))["case_id"]
        out.append(TranscriptStore(p.parent).load(case_id).result)
    return out


def cmd_report(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    rows: list[ResultRow] = []
    for path in args.results:
        try:
            rows.extend(read_results(path))
        except (OSError, KeyError, ValueError) as exc:
            parser.error(f"cannot read results file {path}: {exc}")
    profiles = sorted({(r.profile, r.averaging) for r in rows})
    if len(profiles) > 1:
        _error_record(event="report_error", error=f"incompatible profiles in one merge: {profiles}")
        return 1
    if profiles:
        _emit(sys.stdout, f"# profile: {profiles[0][0]}  averaging: {profiles[0][1]}")
    columns = ["method", "dataset", "acc", "prec", "spec", "recall", "avg", "experts", "api_calls", "cost"]
    _emit(sys.stdout, render_table(rows, columns))
    for r in rows:
        if abs(r.metric_row().avg - r.avg) > 0.01:
            log.warning("%s/%s: stored avg %.2f differs from the recomputed %.2f", r.method, r.dataset, r.avg, r.metric_row().avg)

    if args.transcripts:
        hists = []
        for d in args.transcripts:
            results = _load_results_dir(Path(d))
            hist = expert_histogram(results)
            hists.append(hist)
            _emit(sys.stdout, f"\n# expert histogram: {d} (top {args.top_k})")
            for role, count in hist[: args.top_k]:
                _emit(sys.stdout, f"{count:6d}  {role}")
        if len(hists) == 2:
            ov = overlap(hists[0], hists[1], args.top_k)
            note = f" (only {ov.k} roles available)" if ov.truncated else ""
            _emit(sys.stdout, f"\ntop-{args.top_k} overlap: {ov.value:.2f}{note}")
    return 0


# --------------------------------------------------------------------------
# stats


def _metric_samples(paths: Sequence[str], method: str | None) -> dict[str, list[float]]:
    samples: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    for path in paths:
        for row in read_results(path):
            if method is not None and row.method != method:
                continue
            for m in METRIC_NAMES:
                samples[m].append(getattr(row, m))
    return samples


def cmd_stats(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    runs = _metric_samples(args.runs, args.method)
    base = _metric_samples(args.baseline, args.baseline_method)
    if len(runs["acc"]) < 2:
        _error_record(event="stats_error", error=f"need at least 2 runs, got {len(runs['acc'])}")
        return 1
    if not base["acc"]:
        _error_record(event="stats_error", error="no baseline rows")
        return 1
    pooled = args.variant == "pooled"
    _emit(sys.stdout, f"# variant: {'two-sample pooled' if pooled else 'one-sample vs fixed baseline'}, stars at 0.05/0.01/0.001")
    _emit(sys.stdout, f"{'metric':8s}{'mean':>9s}{'std':>8s}{'t':>10s}{'p':>12s}  df")
    for m in METRIC_NAMES:
        if pooled:
            baseline: float | list[float] = base[m]
        else:
            baseline = sum(base[m]) / len(base[m])
        try:
            res = t_test(runs[m], baseline)
        except EmptyInputError as exc:
            _error_record(event="stats_error", metric=m, error=str(exc))
            return 1
        t_txt = f"{res.t_stat:.2f}{res.stars}"
        p_txt = f"{res.p_value:.4f}{res.stars}"
        _emit(sys.stdout, f"{m:8s}{res.mean_a:9.2f}{res.std_a:8.2f}{t_txt:>10s}{p_txt:>12s}  {res.df}")
    return 0


# --------------------------------------------------------------------------
# inspect


def _short(text: str, width: int = 100) -> str:
    flat = " ".join(text.split())
    return flat if len(flat) <= width else flat[: width - 3] + "..."


def format_consultation(result: CaseRunResult) -> str:
    lines = [f"case {result.case_id}  method {result.method.value}  status {result.status}"]
    if result.error:
        lines.append(f"error: {result.error}")
    lines.append("roster timeline:")
    for r, added in result.roster_timeline:
        if r == 0:
            lines.append(f"  round 0: {', '.join(added)}")
        else:
            noun = "expert" if len(added) == 1 else "experts"
            lines.append(f"  round {r}: +{len(added)} {noun} ({', '.join(added)})")
    if result.consensus_reached:
        lines.append(f"consensus at round {result.rounds_used}")
    else:
        lines.append(f"no consensus after {result.rounds_used} round(s)")
    if result.kg_log:
        lines.append("knowledge gaps:")
        for k in result.kg_log:
            if not k.gap:
                lines.append(f"  round {k.round}: none")
            elif k.recruited:
                lines.append(f"  round {k.round}: gap, recruited {', '.join(k.recruited)}")
            else:
                lines.append(f"  round {k.round}: gap, recruitment skipped")
    lines.append("opinions:")
    for msg in result.transcript:
        if msg.speaker in (Speaker.AGENT, Speaker.MODERATOR):
            lines.append(f"  [round {msg.round}] {msg.role}: {_short(msg.content)}")
    v = result.verdict
    tally = " ".join(f"{k}:{n}" for k, n in v.tally.items())
    lines.append(f"verdict: {v.label} ({v.strategy.value}) tally {tally or '-'}")
    for w in result.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def cmd_inspect(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    root = Path(args.cache_dir)
    name = f"{safe_name(args.case_id)}.transcript.json"
    matches = sorted(root.rglob(name)) if root.is_dir() else []
    if args.method:
        matches = [p for p in matches if p.parent.name == METHODS[args.method].value]
    if not matches:
        _error_record(event="not_found", case_id=args.case_id, error=f"no transcript under {root}")
        return 1
    if len(matches) > 1:
        log.warning("%d transcripts match, showing %s (narrow with --method)", len(matches), matches[0])
    try:
        doc = TranscriptStore(matches[0].parent).load(args.case_id)
    except TranscriptError as exc:
        _error_record(event="transcript_error", case_id=args.case_id, error=str(exc))
        return 1
    _emit(sys.stdout, format_consultation(doc.result))
    return 0


# --------------------------------------------------------------------------
# prompt


def cmd_prompt(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    bindings: dict[str, str] = {}
    if args.dataset:
        cases = load_dataset(args.dataset, args.profile)
        case = next((c for c in cases if c.case_id == args.case_id), None) if args.case_id else cases[0]
        if case is None:
            parser.error(f"case {args.case_id} not in {args.dataset}")
        bindings.update(
            question=prompts.format_question(case),
            answer_template=prompts.answer_template(case.labels).body,
            final_answer_template=prompts.final_answer_template(case.labels).body,
            fewshot_examplers=case.fewshot_examplers,
            visual_cot=prompts.visual_cot_block(case),
        )
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            parser.error(f"--set expects name=value, got {item!r}")
        bindings[key] = value.replace("\\n", "\n")
    try:
        system, user = prompts.render(TemplateId(args.template), bindings)
    except UnboundPlaceholderError as exc:
        _error_record(event="unbound_placeholder", error=str(exc))
        return 1
    if system is not None:
        _emit(sys.stdout, "--- system ---\n" + system)
    _emit(sys.stdout, "--- user ---\n" + user)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kamac", description="Adaptive multi-expert consultation runner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a batch of cases")
    r.add_argument("--dataset", required=True)
    r.add_argument("--profile", choices=sorted(PROFILES), default="medqa")
    r.add_argument("--method", choices=list(METHODS), default="kamac")
    r.add_argument("--model", default=RunConfig.model_id)
    r.add_argument("--temperature", type=float, default=0.0)
    r.add_argument("--rounds", type=int, default=3)
    r.add_argument("--initial-experts", type=int, default=1)
    r.add_argument("--consensus", choices=list(STRATEGIES), default="vote")
    r.add_argument("--team-size", type=int, default=5, help="static team size for majority/consensus")
    r.add_argument("--cache-dir", default=".kamac-cache")
    r.add_argument("--mock-script", help="scripted replies (offline run)")
    r.add_argument("--limit", type=int)
    r.add_argument("--concurrency", type=int, default=1)
    r.add_argument("--out", default="results.tsv")
    r.add_argument("--base-url", help=f"chat-completions endpoint (default ${BASE_URL_ENV} or the public API)")
    r.add_argument("--max-attempts", type=int, default=3)
    r.add_argument("--price-prompt", type=float, default=0.0, help="price per 1M prompt tokens")
    r.add_argument("--price-completion", type=float, default=0.0, help="price per 1M completion tokens")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="merge results files into one table")
    rep.add_argument("results", nargs="+")
    rep.add_argument("--transcripts", nargs="+", help="one or two transcript directories for expert histograms")
    rep.add_argument("--top-k", type=int, default=30)
    rep.set_defaults(func=cmd_report)

    st = sub.add_parser("stats", help="significance of repeated runs against a baseline")
    st.add_argument("--runs", nargs="+", required=True)
    st.add_argument("--baseline", nargs="+", required=True)
    st.add_argument("--method", help="only use rows of this method from --runs")
    st.add_argument("--baseline-method", help="only use rows of this method from --baseline")
    st.add_argument("--variant", choices=["one-sample", "pooled"], default="one-sample")
    st.set_defaults(func=cmd_stats)

    ins = sub.add_parser("inspect", help="pretty-print one case transcript")
    ins.add_argument("case_id")
    ins.add_argument("--cache-dir", default=".kamac-cache")
    ins.add_argument("--method", choices=list(METHODS))
    ins.set_defaults(func=cmd_inspect)

    pr = sub.add_parser("prompt", help="render a prompt template")
    pr.add_argument("template", choices=[t.value for t in TemplateId])
    pr.add_argument("--set", action="append", metavar="NAME=VALUE")
    pr.add_argument("--dataset")
    pr.add_argument("--profile", choices=sorted(PROFILES), default="medqa")
    pr.add_argument("--case-id")
    pr.set_defaults(func=cmd_prompt)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args, parser)
    except KamacError as exc:
        _error_record(event="error", error=f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
