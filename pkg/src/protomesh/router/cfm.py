"""Canonical capability model: boolean facets per protocol, in six groups."""

from __future__ import annotations

from types import MappingProxyType
from typing import Mapping

LABELS = ("A2A", "ACP", "Agora", "ANP")
FALLBACK_ORDER = ("A2A", "ACP", "Agora", "ANP")

FACET_GROUPS: Mapping[str, tuple[str, ...]] = MappingProxyType(
    {
        "transport_interaction": ("streaming", "persistent_session", "request_response", "async_first"),
        "long_running_artifacts": ("job_status", "artifact_refs"),
        "identity_confidentiality": ("did_identity", "e2e_encryption", "enterprise_auth"),
        "delivery_replay": ("idempotency", "replay_window", "ordering"),
        "operation_semantics": ("rest_resource", "idempotent_ops", "routine_governance", "conversational"),
        "trust_governance": ("versioned_routines", "audit"),
    }
)
FACETS = frozenset(f for group in FACET_GROUPS.values() for f in group)

CapabilityModel = Mapping[str, frozenset[str]]

DEFAULT_CFM: CapabilityModel = MappingProxyType(
    {
        "A2A": frozenset(
            {"streaming", "request_response", "artifact_refs", "enterprise_auth", "idempotency", "conversational"}
        ),
        "ACP": frozenset(
            {
                "streaming", "request_response", "async_first", "job_status", "artifact_refs",
                "enterprise_auth", "idempotency", "rest_resource", "idempotent_ops",
            }
        ),
        "Agora": frozenset({"request_response", "conversational", "routine_governance", "versioned_routines", "audit"}),
        "ANP": frozenset(
            {"streaming", "persistent_session", "did_identity", "e2e_encryption", "ordering", "replay_window"}
        ),
    }
)

# Capability anchors that define each protocol, used by the narrative tie-break.
ANCHORS: Mapping[str, frozenset[str]] = MappingProxyType(
    {
        "A2A": frozenset({"streaming"}),
        "ACP": frozenset({"rest_resource", "idempotent_ops", "job_status"}),
        "Agora": frozenset({"routine_governance"}),
        "ANP": frozenset({"did_identity", "e2e_encryption"}),
    }
)


def check_cfm(cfm: CapabilityModel) -> list[str]:
    """Violations of the structural invariants the router relies on."""
    problems = []
    if set(cfm) != set(LABELS):
        problems.append(f"protocols must be exactly {LABELS}")
        return problems
    for label, facets in cfm.items():
        unknown = set(facets) - FACETS
        if unknown:
            problems.append(f"{label}: unknown facets {sorted(unknown)}")
    if "e2e_encryption" in cfm["A2A"]:
        problems.append("A2A must lack e2e_encryption")
    if not {"did_identity", "e2e_encryption"} <= cfm["ANP"]:
        problems.append("ANP must have did_identity and e2e_encryption")
    if not {"rest_resource", "job_status"} <= cfm["ACP"]:
        problems.append("ACP must have rest_resource and job_status")
    if not {"routine_governance", "versioned_routines"} <= cfm["Agora"]:
        problems.append("Agora must have routine_governance and versioned_routines")
    return problems


def wire_name(label: str) -> str:
    """``"Agora"`` -> ``"agora"``; router labels map to lowercase protocol names."""
    return label.lower()


def label_for(name: str) -> str:
    for label in LABELS:
        if label.lower() == name.lower():
            return label
    raise ValueError(f"unknown protocol {name!r}")
