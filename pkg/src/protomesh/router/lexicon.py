"""Fixed phrase lexicon mapping requirement text to capability flags.

Acronyms (REST, E2E, DID) match case-sensitively; all other phrases ignore
case. A clause opened by a negator (avoid / without / no) runs to the next
clause boundary and contributes its hits to the excluded set instead.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

LEXICON_VERSION = "lexicon-v1"

# (flag, pattern, case_sensitive)
_ENTRIES: tuple[tuple[str, str, bool], ...] = (
    ("e2e_encryption", r"end-to-end encrypt(?:ion|ed)", False),
    ("e2e_encryption", r"\bE2E\b", True),
    ("e2e_encryption", r"\bconfidential(?:ity)?\b", False),
    ("did_identity", r"\bDIDs?\b", True),
    ("did_identity", r"\bdecentralized identit(?:y|ies)\b", False),
    ("did_identity", r"\bverifiable identit(?:y|ies)\b", False),
    ("rest_resource", r"\bREST(?:ful)?\b", True),
    ("rest_resource", r"\bbatch\b", False),
    ("rest_resource", r"\barchival\b", False),
    ("rest_resource", r"\bresources?\b", False),
    ("rest_resource", r"\bstate[- ]machines?\b", False),
    ("idempotent_ops", r"\bidempoten(?:t|cy)\b", False),
    ("routine_governance", r"\broutines?\b", False),
    ("routine_governance", r"\bversion(?:ed|ing|s)?\b", False),
    ("routine_governance", r"\bauditable procedures?\b", False),
    ("routine_governance", r"\bgovernance\b", False),
    ("streaming", r"\bstreaming\b", False),
    ("streaming", r"\bserver-sent(?: events)?\b", False),
    ("streaming", r"\breal-time updates\b", False),
    ("job_status", r"\blong-running\b", False),
    ("job_status", r"\bjob status\b", False),
    ("job_status", r"\bresum(?:e|able|ption)\b", False),
)

_COMPILED = tuple((flag, re.compile(p, 0 if cs else re.IGNORECASE)) for flag, p, cs in _ENTRIES)

NEGATION = re.compile(r"\b(?:avoid|avoids|avoiding|without|no)\b[^.,;:!?]*?(?=[.,;:!?]|\bbut\b|$)", re.IGNORECASE)

# Priority stages: identity/confidentiality, then operation semantics, then interaction.
IDENTITY_FLAGS = frozenset({"did_identity", "e2e_encryption"})
SEMANTIC_FLAGS = frozenset({"rest_resource", "idempotent_ops", "routine_governance"})
INTERACTION_FLAGS = frozenset({"streaming", "job_status"})
STAGES = (IDENTITY_FLAGS, SEMANTIC_FLAGS, INTERACTION_FLAGS)
HARD_FLAGS = IDENTITY_FLAGS | SEMANTIC_FLAGS


@dataclass(frozen=True)
class Hit:
    start: int
    end: int
    text: str
    flag: str | None  # None for a negated clause
    negated: bool = False


def flags_in(span: str) -> list[str]:
    """Lexicon flags mentioned anywhere in ``span``, in order of appearance."""
    found = sorted((m.start(), flag) for flag, rx in _COMPILED for m in rx.finditer(span))
    out: list[str] = []
    for _, flag in found:
        if flag not in out:
            out.append(flag)
    return out


def scan(text: str) -> list[Hit]:
    """Positive lexicon hits outside negated clauses, plus the negated clauses.

    Each negated clause is one hit spanning the whole clause; it is only
    reported when it mentions at least one lexicon term.
    """
    negated = [(m.start(), m.end()) for m in NEGATION.finditer(text)]

    def inside(pos: int) -> bool:
        return any(a <= pos < b for a, b in negated)

    hits = [
        Hit(m.start(), m.end(), m.group(0), flag)
        for flag, rx in _COMPILED
        for m in rx.finditer(text)
        if not inside(m.start())
    ]
    for a, b in negated:
        clause = text[a:b].rstrip()
        if flags_in(clause):
            hits.append(Hit(a, a + len(clause), clause, None, negated=True))
    hits.sort(key=lambda h: (h.start, -h.end))
    return hits


def is_negated_span(span: str) -> bool:
    return NEGATION.match(span) is not None
