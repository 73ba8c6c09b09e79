"""Deterministic protocol selection: extract -> map -> filter -> priority -> tie-break."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .cfm import ANCHORS, DEFAULT_CFM, FACETS, FALLBACK_ORDER, LABELS, CapabilityModel
from .lexicon import HARD_FLAGS, IDENTITY_FLAGS, STAGES, flags_in, is_negated_span, scan

log = logging.getLogger(__name__)

SPEC_ONLY = "spec_only"
SPEC_PERF = "spec_perf"
RECORD_FIELDS = frozenset({"module_id", "selected_protocol", "evidence_spans", "rationale", "infeasible"})
_NUMERIC = re.compile(r"(?<![A-Za-z])\d+(?:[.,]\d+)*")
_NUMBER_WORDS = re.compile(r"\b(?:percent|ms|seconds?|milliseconds?)\b", re.IGNORECASE)


@dataclass(frozen=True)
class RequirementSet:
    required: frozenset[str] = frozenset()
    preferred: tuple[str, ...] = ()
    excluded: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.required & self.excluded:
            raise ValueError("required and excluded overlap")

    @property
    def cues(self) -> frozenset[str]:
        return self.required | frozenset(self.preferred)


@dataclass(frozen=True)
class PriorTable:
    ranking: tuple[str, ...] = ("A2A", "ACP", "ANP", "Agora")

    def __post_init__(self) -> None:
        if sorted(self.ranking) != sorted(LABELS):
            raise ValueError(f"ranking must be a permutation of {LABELS}")


@dataclass(frozen=True)
class DecisionRecord:
    module_id: str
    selected_protocol: str
    evidence_spans: tuple[str, ...] = ()
    rationale: str = ""
    infeasible: bool = False
    requirements: RequirementSet = field(default_factory=RequirementSet, compare=False)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "module_id": self.module_id,
            "selected_protocol": self.selected_protocol,
            "evidence_spans": list(self.evidence_spans),
            "rationale": self.rationale,
        }
        if self.infeasible:
            doc["infeasible"] = True
        return doc


# --------------------------------------------------------------------------- pipeline stages


def extract_evidence_spans(text: str) -> list[str]:
    """Verbatim lexicon spans in order of first occurrence (negated clauses kept whole)."""
    spans: list[str] = []
    for hit in scan(text):
        if hit.text not in spans:
            spans.append(hit.text)
    return spans


def map_spans_to_cfm(spans: Iterable[str], cfm: CapabilityModel = DEFAULT_CFM) -> RequirementSet:
    required: set[str] = set()
    preferred: list[str] = []
    excluded: set[str] = set()
    for span in spans:
        flags = [f for f in flags_in(span) if f in FACETS]
        if not flags:
            log.debug("dropping span without lexicon flag: %r", span)
            continue
        if is_negated_span(span):
            excluded.update(flags)
            continue
        for flag in flags:
            if flag in HARD_FLAGS:
                required.add(flag)
            elif flag not in preferred:
                preferred.append(flag)
    # An explicit exclusion overrides a positive mention of the same flag.
    return RequirementSet(
        frozenset(required - excluded), tuple(f for f in preferred if f not in excluded), frozenset(excluded)
    )


def is_protocol_compatible(protocol: str, req: RequirementSet, cfm: CapabilityModel = DEFAULT_CFM) -> bool:
    caps = cfm[protocol]
    return req.required <= caps and not (caps & req.excluded)


def priority_decide(
    candidates: Sequence[str], req: RequirementSet, cfm: CapabilityModel = DEFAULT_CFM
) -> str | list[str]:
    """Three fixed stages; each keeps the candidates covering most of its cues."""
    pool = [p for p in FALLBACK_ORDER if p in candidates] + [p for p in candidates if p not in FALLBACK_ORDER]
    for stage in STAGES:
        cues = req.cues & stage
        if not cues or len(pool) == 1:
            continue
        best = max(len(cfm[p] & cues) for p in pool)
        pool = [p for p in pool if len(cfm[p] & cues) == best]
    return pool[0] if len(pool) == 1 else pool


def _anchor_positions(text: str) -> dict[str, int]:
    first: dict[str, int] = {}
    for hit in scan(text):
        if hit.negated or hit.flag is None:
            continue
        for label, anchors in ANCHORS.items():
            if hit.flag in anchors and label not in first:
                first[label] = hit.start
    return first


def pick_by_narrative(text: str, tied: Sequence[str]) -> str:
    """Earliest capability anchor in the text wins, else the stable fallback order."""
    positions = _anchor_positions(text)
    anchored = [p for p in tied if p in positions]
    if anchored:
        return min(anchored, key=lambda p: (positions[p], FALLBACK_ORDER.index(p)))
    return sorted(tied, key=_fallback_rank)[0]


def _fallback_rank(p: str) -> int:
    return FALLBACK_ORDER.index(p) if p in FALLBACK_ORDER else len(FALLBACK_ORDER)


def tie_break_with_prior(candidates: Sequence[str], prior: PriorTable | Mapping[str, Any]) -> str:
    ranking = list(prior.ranking if isinstance(prior, PriorTable) else prior.get("ranking", ["A2A", "ACP", "ANP", "Agora"]))
    return sorted(candidates, key=lambda p: ranking.index(p) if p in ranking else len(ranking))[0]


# --------------------------------------------------------------------------- bandit overlay


Posterior = Mapping[str, tuple[float, float]]


def bandit_select(feasible: Sequence[str], posterior: Posterior, rng, context: Mapping | None = None) -> str:
    """Thompson sampling over already-feasible protocols.

    ``rng`` is a :class:`numpy.random.Generator`. Exact draw ties go to the
    lexicographically smaller protocol name.
    """
    if not feasible:
        raise ValueError("feasible set is empty")
    draws = {}
    for p in feasible:
        a, b = posterior.get(p, (1.0, 1.0))
        if a <= 0 or b <= 0:
            raise ValueError(f"Beta parameters must be positive for {p}")
        draws[p] = float(rng.beta(a, b))
    return sorted(draws.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def update_posterior(posterior: Posterior, protocol: str, success: bool) -> dict[str, tuple[float, float]]:
    updated = dict(posterior)
    a, b = updated.get(protocol, (1.0, 1.0))
    updated[protocol] = (a + 1.0, b) if success else (a, b + 1.0)
    return updated


# --------------------------------------------------------------------------- rationale linter


def lint_rationale(text: str) -> list[str]:
    """Numeric tokens (and unit words) that a rationale must not contain."""
    return _NUMERIC.findall(text) + _NUMBER_WORDS.findall(text)


def lint_record(doc: Mapping[str, Any]) -> list[str]:
    problems = [f"unexpected field {k}" for k in doc if k not in RECORD_FIELDS]
    if doc.get("selected_protocol") not in LABELS:
        problems.append(f"invalid protocol {doc.get('selected_protocol')!r}")
    problems += [f"numeric token {t!r} in rationale" for t in lint_rationale(str(doc.get("rationale", "")))]
    return problems


def _describe(flags: Iterable[str]) -> str:
    return ", ".join(f.replace("_", " ") for f in sorted(flags))


def _rationale(protocol: str, req: RequirementSet, how: str) -> str:
    parts = [f"{protocol} chosen by capability match and priority order"]
    if req.required:
        parts.append(f"hard constraints: {_describe(req.required)}")
    if req.excluded:
        parts.append(f"excluded: {_describe(req.excluded)}")
    if req.preferred:
        parts.append(f"preferences: {_describe(req.preferred)}")
    if how:
        parts.append(how)
    return "; ".join(parts) + "."


# --------------------------------------------------------------------------- routing


def _decide(text: str, req: RequirementSet, candidates: list[str], cfm: CapabilityModel, prior) -> tuple[str, str]:
    chosen = priority_decide(candidates, req, cfm)
    if isinstance(chosen, str):
        return chosen, "" if len(candidates) == 1 else "priority stages decisive"
    if prior is not None:
        return tie_break_with_prior(chosen, prior), "tie resolved by prior ranking"
    anchored = any(p in _anchor_positions(text) for p in chosen)
    how = "tie resolved by narrative anchor order" if anchored else "tie resolved by stable fallback order"
    return pick_by_narrative(text, chosen), how


def _relaxed(text: str, req: RequirementSet, cfm: CapabilityModel, prior) -> tuple[str, str]:
    """Choice when no protocol meets every hard constraint.

    Lower-priority locks are given up first, so identity and confidentiality
    requirements keep dominating even in contradictory module texts.
    """
    identity = req.required & IDENTITY_FLAGS
    loose = RequirementSet(identity, req.preferred, req.excluded - identity)
    candidates = [p for p in FALLBACK_ORDER if is_protocol_compatible(p, loose, cfm)]
    if candidates:
        protocol, _ = _decide(text, loose, candidates, cfm, prior)
        return protocol, "operation locks relaxed to keep identity requirements"
    for p in FALLBACK_ORDER:
        if identity and identity <= cfm[p]:
            return p, "exclusions relaxed to keep identity requirements"
    for p in FALLBACK_ORDER:
        if not cfm[p] & req.excluded:
            return p, "stable fallback order"
    return FALLBACK_ORDER[0], "stable fallback order"


def route_module(
    module_id: str, text: str, cfm: CapabilityModel = DEFAULT_CFM, prior: PriorTable | Mapping | None = None
) -> DecisionRecord:
    spans = extract_evidence_spans(text)
    req = map_spans_to_cfm(spans, cfm)
    candidates = [p for p in FALLBACK_ORDER if is_protocol_compatible(p, req, cfm)]
    if candidates:
        protocol, how = _decide(text, req, candidates, cfm, prior)
        return DecisionRecord(module_id, protocol, tuple(spans), _rationale(protocol, req, how), False, req)
    protocol, how = _relaxed(text, req, cfm, prior)
    rationale = f"No protocol satisfies every constraint; {_rationale(protocol, req, how)}"
    return DecisionRecord(module_id, protocol, tuple(spans), rationale, True, req)


def module_id_of(module: Mapping[str, Any]) -> str:
    return str(module["id"] if "id" in module else module["module_id"])


def route_spec_only(
    spec_text: str,
    modules: Sequence[Mapping[str, Any]],
    cfm: CapabilityModel = DEFAULT_CFM,
    *,
    prior: PriorTable | Mapping | None = None,
) -> dict[str, DecisionRecord]:
    """One decision per module.

    Evidence comes from each module's own ``text`` when present (modules are
    judged independently), else from ``spec_text``. Passing ``prior`` gives
    the spec+perf mode: the prior ranking breaks ties before the narrative step.
    """
    if not modules:
        raise ValueError("modules must be non-empty")
    decisions = {}
    for m in modules:
        mid = module_id_of(m)
        decisions[mid] = route_module(mid, m.get("text") or spec_text, cfm, prior)
    return decisions


def route(
    spec_text: str,
    modules: Sequence[Mapping[str, Any]],
    mode: str = SPEC_ONLY,
    prior: PriorTable | Mapping | None = None,
    cfm: CapabilityModel = DEFAULT_CFM,
) -> dict[str, DecisionRecord]:
    if mode == SPEC_ONLY:
        return route_spec_only(spec_text, modules, cfm)
    if mode == SPEC_PERF:
        if prior is None:
            raise ValueError("spec_perf mode requires a prior table")
        return route_spec_only(spec_text, modules, cfm, prior=prior)
    raise ValueError(f"unknown mode {mode!r}")
