"""Dataset loaders and the per-case transcript store."""

from __future__ import annotations

import csv
import json
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from ._fsutil import atomic_write_text, safe_name
from ._version import __version__
from .core import Box3D, CaseRecord, Modality, RunConfig
from .errors import (
    DatasetError,
    IncompatibleTranscriptError,
    SchemaError,
    TranscriptError,
    TranscriptNotFoundError,
    ValidationError,
)
from .orchestrator import CaseRunResult

TRANSCRIPT_FORMAT = "kamac-transcript"
TRANSCRIPT_VERSION = 1

PROGN_COLUMNS = (
    "Age",
    "Sex",
    "ECOG PS",
    "Smoking PY",
    "Smoking Status",
    "Ds Site",
    "Subsite",
    "T",
    "N",
    "M",
    "Stage",
    "Path",
    "HPV",
    "Tx Modality",
    "Chemo?",
    "Dose",
    "Fx",
    "Local",
    "Regional",
    "Distant",
    "2nd Ca",
    "ContrastEnhanced",
)

PROGN_OPTIONS = {
    "A": "Yes, the patient will survive",
    "B": "No, the patient will not survive",
}

_SURVIVAL = {
    "a": "A",
    "alive": "A",
    "survived": "A",
    "yes": "A",
    "b": "B",
    "dead": "B",
    "deceased": "B",
    "no": "B",
}


def render_progn_question(clinical_vars: Mapping[str, str]) -> str:
    lines = ["Clinical and imaging variables of a head and neck cancer patient:"]
    lines += [f"{name}: {value}" for name, value in clinical_vars.items()]
    lines += ["", "Based on this information, will the patient be alive at the last follow-up?"]
    return "\n".join(lines)


QUESTION_RENDERERS = {"progn-q/1": render_progn_question}


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    option_labels: tuple[str, ...]
    prompt_variant: str
    averaging: str
    positive_label: str | None = None
    question_renderer: str | None = None

    def __post_init__(self) -> None:
        if len(set(self.option_labels)) != len(self.option_labels):
            raise ValidationError(f"profile {self.name}: option labels must be unique")
        if self.prompt_variant == "progn_strict" and self.positive_label is None:
            raise ValidationError(f"profile {self.name}: the strict variant needs a positive label")
        if self.positive_label is not None and self.positive_label not in self.option_labels:
            raise ValidationError(f"profile {self.name}: positive label {self.positive_label!r} is not an option")
        if self.averaging not in ("macro", "binary"):
            raise ValidationError(f"profile {self.name}: unknown averaging {self.averaging!r}")
        if self.averaging == "binary" and self.positive_label is None:
            raise ValidationError(f"profile {self.name}: binary averaging needs a positive label")


PROFILES: dict[str, DatasetProfile] = {
    "medqa": DatasetProfile("medqa", ("A", "B", "C", "D", "E"), "medqa", "macro"),
    "prognvqa": DatasetProfile("prognvqa", ("A", "B"), "progn_strict", "binary", "A", "progn-q/1"),
}


# --------------------------------------------------------------------------
# MedQA


def _medqa_options(raw: Any, where: str) -> dict[str, str]:
    if isinstance(raw, Mapping):
        items = [(str(k).strip().upper(), str(v)) for k, v in raw.items()]
    elif isinstance(raw, list):
        items = []
        for i, opt in enumerate(raw):
            if isinstance(opt, Mapping) and "key" in opt:
                items.append((str(opt["key"]).strip().upper(), str(opt["value"])))
            else:
                items.append((chr(ord("A") + i), str(opt)))
    else:
        raise DatasetError(f"{where}: options must be a mapping or a list")
    labels = [k for k, _ in items]
    if len(set(labels)) != len(labels):
        raise DatasetError(f"{where}: duplicate option labels {labels}")
    return dict(items)


def _medqa_gold(rec: Mapping[str, Any], options: Mapping[str, str], where: str) -> str:
    for key in ("answer_idx", "label"):
        if rec.get(key) not in (None, ""):
            return str(rec[key]).strip().upper()
    answer = rec.get("answer")
    if isinstance(answer, str):
        if answer.strip().upper() in options:
            return answer.strip().upper()
        for label, text in options.items():
            if text.strip() == answer.strip():
                return label
    raise DatasetError(f"{where}: no answer_idx/label field and the answer text matches no option")


def load_medqa(path: str | Path) -> list[CaseRecord]:
    """One JSON object per line: question, options, answer_idx (or label), optional id."""
    path = Path(path)
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, Mapping):
                raise DatasetError(f"{where}: expected a JSON object")
            if "question" not in rec or "options" not in rec:
                raise DatasetError(f"{where}: record needs 'question' and 'options'")
            case_id = str(rec.get("id") or rec.get("case_id") or f"medqa-{len(cases) + 1:05d}")
            if case_id in seen:
                raise DatasetError(f"{where}: duplicate case id {case_id!r}")
            options = _medqa_options(rec["options"], where)
            gold = _medqa_gold(rec, options, where)
            try:
                case = CaseRecord(
                    case_id=case_id,
                    stem=str(rec["question"]),
                    options=options,
                    gold_label=gold,
                    fewshot_examplers=str(rec.get("fewshot_examplers") or ""),
                )
            except ValidationError as exc:
                raise DatasetError(f"{where}: {exc}") from exc
            seen.add(case_id)
            cases.append(case)
    return cases


# --------------------------------------------------------------------------
# Progn-VQA


def _parse_boxes(raw: str, where: str) -> tuple[Box3D, ...]:
    boxes = []
    for chunk in raw.split(";"):
        chunk = chunk.strip().strip("[]")
        if not chunk:
            continue
        try:
            values = [float(v) for v in chunk.split(",")]
            boxes.append(Box3D.from_dict(values))
        except (ValueError, ValidationError) as exc:
            raise DatasetError(f"{where}: bad bbox {chunk!r}: {exc}") from exc
    return tuple(boxes)


def load_prognvqa(path: str | Path, profile: DatasetProfile | None = None) -> list[CaseRecord]:
    """Comma-separated table with the clinical columns plus case_id and survival.

    Optional columns: ``image_ref`` and ``bbox`` (boxes separated by ``;``,
    six comma-separated fractions each in z, y, x min/max order).
    """
    profile = profile or PROFILES["prognvqa"]
    renderer = QUESTION_RENDERERS[profile.question_renderer or "progn-q/1"]
    path = Path(path)
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in ("case_id", *PROGN_COLUMNS, "survival") if c not in header]
        if missing:
            raise SchemaError(missing)
        reader.fieldnames = header
        for lineno, row in enumerate(reader, 2):
            where = f"{path}:{lineno}"
            case_id = (row["case_id"] or "").strip()
            if not case_id:
                raise DatasetError(f"{where}: empty case_id")
            if case_id in seen:
                raise DatasetError(f"{where}: duplicate case id {case_id!r}")
            gold = _SURVIVAL.get((row["survival"] or "").strip().lower())
            if gold is None:
                raise DatasetError(f"{where}: survival must be alive/dead (or A/B), got {row['survival']!r}")
            clinical = {name: (row[name] or "").strip() for name in PROGN_COLUMNS}
            image_ref = (row.get("image_ref") or "").strip() or None
            boxes = _parse_boxes(row.get("bbox") or "", where) or None
            if boxes and image_ref is None:
                raise DatasetError(f"{where}: bbox given without an image_ref")
            cases.append(
                CaseRecord(
                    case_id=case_id,
                    stem=renderer(clinical),
                    options=dict(PROGN_OPTIONS),
                    gold_label=gold,
                    modality=Modality.TEXT_WITH_IMAGE if image_ref else Modality.TEXT_ONLY,
                    clinical_vars=clinical,
                    image_ref=image_ref,
                    roi_boxes=boxes,
                )
            )
            seen.add(case_id)
    return cases


def load_dataset(path: str | Path, profile: str | DatasetProfile) -> list[CaseRecord]:
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    if prof.prompt_variant == "progn_strict":
        return load_prognvqa(path, prof)
    cases = load_medqa(path)
    for case in cases:
        extra = [label for label in case.labels if label not in prof.option_labels]
        if extra:
            raise DatasetError(f"{case.case_id}: labels {extra} are outside profile {prof.name}")
    return cases


# --------------------------------------------------------------------------
# transcripts


@dataclass(frozen=True)
class TranscriptDocument:
    case: CaseRecord
    config: RunConfig
    result: CaseRunResult
    tool_version: str = __version__
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def case_id(self) -> str:
        return self.case.case_id

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": TRANSCRIPT_FORMAT,
            "version": TRANSCRIPT_VERSION,
            "tool_version": self.tool_version,
            "case_id": self.case_id,
            "case": self.case.to_dict(),
            "config": self.config.to_dict(),
            "result": self.result.to_dict(),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TranscriptDocument":
        if data.get("format") != TRANSCRIPT_FORMAT or data.get("version") != TRANSCRIPT_VERSION:
            raise IncompatibleTranscriptError(
                f"expected {TRANSCRIPT_FORMAT} v{TRANSCRIPT_VERSION}, found {data.get('format')} v{data.get('version')}"
            )
        return cls(
            case=CaseRecord.from_dict(data["case"]),
            config=RunConfig.from_dict(data["config"]),
            result=CaseRunResult.from_dict(data["result"]),
            tool_version=data.get("tool_version", ""),
            extra=dict(data.get("extra") or {}),
        )


class TranscriptStore:
    """``<root>/<case_id>.transcript.json``; writes are atomic and serialized per case."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def path_for(self, case_id: str) -> Path:
        return self.root / f"{safe_name(case_id)}.transcript.json"

    def _lock(self, case_id: str) -> threading.Lock:
        with self._guard:
            return self._locks[case_id]

    def save(self, doc: TranscriptDocument) -> Path:
        path = self.path_for(doc.case_id)
        text = json.dumps(doc.to_dict(), indent=1, ensure_ascii=False) + "\n"
        with self._lock(doc.case_id):
            atomic_write_text(path, text)
        return path

    def save_result(self, result: CaseRunResult, case: CaseRecord, config: RunConfig) -> None:
        self.save(TranscriptDocument(case, config, result))

    def load(self, case_id: str) -> TranscriptDocument:
        path = self.path_for(case_id)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise TranscriptNotFoundError(f"no transcript for case {case_id!r} under {self.root}") from exc
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TranscriptError(f"{path}: unreadable transcript ({exc.msg})") from exc
        try:
            return TranscriptDocument.from_dict(data)
        except IncompatibleTranscriptError as exc:
            raise IncompatibleTranscriptError(f"{path}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise TranscriptError(f"{path}: malformed transcript ({exc})") from exc

    def case_ids(self) -> list[str]:
        ids = []
        for p in sorted(self.root.glob("*.transcript.json")):
            try:
                ids.append(json.loads(p.read_text(encoding="utf-8"))["case_id"])
            except (OSError, ValueError, KeyError):
                continue
        return ids


def save_transcript(store: TranscriptStore, doc: TranscriptDocument) -> Path:
    return store.save(doc)


def load_transcript(store: TranscriptStore, case_id: str) -> TranscriptDocument:
    return store.load(case_id)


__all__ = [
    "DatasetProfile",
    "PROFILES",
    "PROGN_COLUMNS",
    "PROGN_OPTIONS",
    "QUESTION_RENDERERS",
    "TranscriptDocument",
    "TranscriptStore",
    "load_dataset",
    "load_medqa",
    "load_prognvqa",
    "load_transcript",
    "render_progn_question",
    "save_transcript",
]
