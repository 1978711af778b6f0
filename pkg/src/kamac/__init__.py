"""Adaptive multi-expert consultation engine with evaluation tooling."""

from ._version import __version__
from .core import (
    ABSTAIN,
    Box3D,
    CaseRecord,
    DiscussionState,
    ExpertSpec,
    HierarchyEdge,
    Method,
    RunConfig,
    Strategy,
    UsageLedger,
    Verdict,
    ledger_merge,
    normalize_role,
)
from .gateway import Gateway, RemoteBackend, ReplyCache, ScriptedBackend, ScriptRule
from .orchestrator import CaseRunResult, run_baseline, run_case

__all__ = [
    "ABSTAIN",
    "Box3D",
    "CaseRecord",
    "CaseRunResult",
    "DiscussionState",
    "ExpertSpec",
    "Gateway",
    "HierarchyEdge",
    "Method",
    "RemoteBackend",
    "ReplyCache",
    "RunConfig",
    "ScriptRule",
    "ScriptedBackend",
    "Strategy",
    "UsageLedger",
    "Verdict",
    "__version__",
    "ledger_merge",
    "normalize_role",
    "run_baseline",
    "run_case",
]
