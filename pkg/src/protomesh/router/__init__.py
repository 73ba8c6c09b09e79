"""Rule-based protocol router and network-plan builder."""

from .cfm import ANCHORS, DEFAULT_CFM, FACET_GROUPS, FALLBACK_ORDER, LABELS, check_cfm, label_for, wire_name
from .engine import (
    SPEC_ONLY,
    SPEC_PERF,
    DecisionRecord,
    PriorTable,
    RequirementSet,
    bandit_select,
    extract_evidence_spans,
    is_protocol_compatible,
    lint_rationale,
    lint_record,
    map_spans_to_cfm,
    pick_by_narrative,
    priority_decide,
    route,
    route_module,
    route_spec_only,
    tie_break_with_prior,
    update_posterior,
)
from .lexicon import LEXICON_VERSION
from .plan import apply_router_decisions, decide_native_features

__all__ = [
    "ANCHORS",
    "DEFAULT_CFM",
    "FACET_GROUPS",
    "FALLBACK_ORDER",
    "LABELS",
    "LEXICON_VERSION",
    "SPEC_ONLY",
    "SPEC_PERF",
    "DecisionRecord",
    "PriorTable",
    "RequirementSet",
    "apply_router_decisions",
    "bandit_select",
    "check_cfm",
    "decide_native_features",
    "extract_evidence_spans",
    "is_protocol_compatible",
    "label_for",
    "lint_rationale",
    "lint_record",
    "map_spans_to_cfm",
    "pick_by_narrative",
    "priority_decide",
    "route",
    "route_module",
    "route_spec_only",
    "tie_break_with_prior",
    "update_posterior",
    "wire_name",
]
