"""Append-only scenario event log, totally ordered by ``(t, seq)``."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

SEND = "send"
QUEUE_START = "queue_start"
SERVICE_START = "service_start"
SERVICE_END = "service_end"
FIRST_TOKEN = "first_token"
DONE = "done"
FAIL = "fail"
KILL = "kill"
RECONNECT = "reconnect"
PROBE = "probe"
KINDS = frozenset({SEND, QUEUE_START, SERVICE_START, SERVICE_END, FIRST_TOKEN, DONE, FAIL, KILL, RECONNECT, PROBE})

# Lifecycle order a single request's timestamps must respect.
LIFECYCLE = (SEND, QUEUE_START, SERVICE_START, SERVICE_END, DONE)

# Durations derived from two timestamps are reported at nanosecond resolution,
# so (k + d) - k reads back as d instead of one ulp below it.
DURATION_DECIMALS = 9


def duration(start: float, end: float) -> float:
    return round(end - start, DURATION_DECIMALS)


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    request_id: str = ""
    agent: str = ""
    bytes: int = 0
    attempt: int = 0
    seq: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        doc = asdict(self)
        if self.error is None:
            del doc["error"]
        return doc


class EventLog:
    """Concurrent producers append; readers see the flushed total order."""

    def __init__(self, clock: Callable[[], float] | None = None):
        self._clock = clock
        self._events: list[Event] = []
        self._seq = 0
        self._sorted = True

    def record(
        self,
        kind: str,
        request_id: str = "",
        agent: str = "",
        *,
        bytes: int = 0,
        attempt: int = 0,
        t: float | None = None,
        error: str | None = None,
    ) -> Event:
        if kind not in KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if t is None:
            if self._clock is None:
                raise ValueError("no clock bound; pass t explicitly")
            t = self._clock()
        self._seq += 1
        event = Event(float(t), kind, request_id, agent, int(bytes), int(attempt), self._seq, error)
        if self._events and (event.t, event.seq) < (self._events[-1].t, self._events[-1].seq):
            self._sorted = False
        self._events.append(event)
        return event

    @property
    def events(self) -> list[Event]:
        if not self._sorted:
            self._events.sort(key=lambda e: (e.t, e.seq))
            self._sorted = True
        return list(self._events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self._events)

    def of_kind(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]

    def by_request(self) -> dict[str, dict[str, Event]]:
        """First event of each kind per request id."""
        out: dict[str, dict[str, Event]] = defaultdict(dict)
        for e in self.events:
            if e.request_id:
                out[e.request_id].setdefault(e.kind, e)
        return dict(out)

    def monotonicity_violations(self) -> list[str]:
        problems = []
        for rid, kinds in self.by_request().items():
            stamps = [(k, kinds[k].t) for k in LIFECYCLE if k in kinds]
            for (ka, ta), (kb, tb) in zip(stamps, stamps[1:]):
                if ta > tb:
                    problems.append(f"{rid}: {ka} at {ta} after {kb} at {tb}")
        return problems

    def signature(self) -> list[tuple]:
        """Order-sensitive content used for determinism checks."""
        return [(e.t, e.kind, e.request_id, e.agent, e.bytes, e.attempt, e.error) for e in self.events]

    # -- persistence

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), separators=(",", ":")) + "\n" for e in self.events)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_events(cls, events: Iterable[Event | dict]) -> "EventLog":
        log = cls()
        for e in events:
            doc = e.to_dict() if isinstance(e, Event) else dict(e)
            doc.pop("seq", None)
            t = doc.pop("t")
            kind = doc.pop("kind")
            log.record(kind, doc.pop("request_id", ""), doc.pop("agent", ""), t=t, **doc)
        return log

    @classmethod
    def read(cls, path: str | Path) -> "EventLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_events(json.loads(line) for line in lines if line.strip())
