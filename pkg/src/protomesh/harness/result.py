from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .config import ScenarioConfig
from .eventlog import EventLog


@dataclass
class RunResult:
    """Event log of one scenario run plus the adapter-layer byte totals."""

    config: ScenarioConfig
    log: EventLog
    byte_totals: dict[str, int]
    details: dict[str, Any] = field(default_factory=dict)
