"""In-process wire tap and the adapter-layer metric registry.

Frames are captured at the middleware boundary (post-encode, pre-transport
and symmetric on receive). The tap feeds byte accounting and the sniffing
probes.
"""

from __future__ import annotations

import bisect
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, NamedTuple

# Frame classes.
PAYLOAD = "payload"
CONTROL = "control"  # heartbeats and protocol-level control frames
HANDSHAKE = "handshake"  # key agreement, discovery and priming; never metered
RETRY_OVERHEAD = "retry_overhead"

LATENCY_BUCKETS = (0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0)


class MetricLabels(NamedTuple):
    src_agent: str
    dst_id: str
    protocol: str


@dataclass(frozen=True)
class TapContext:
    src: str
    dst: str
    protocol: str
    attempt: int = 0
    kind: str = PAYLOAD

    @property
    def labels(self) -> MetricLabels:
        return MetricLabels(self.src, self.dst, self.protocol)


@dataclass(frozen=True)
class Frame:
    seq: int
    t: float
    direction: str  # "out" (towards dst) or "in"
    src: str
    dst: str
    protocol: str
    kind: str
    attempt: int
    data: bytes

    @property
    def labels(self) -> MetricLabels:
        return MetricLabels(self.src, self.dst, self.protocol)


class WireTap:
    """Records every frame and forwards it to subscribers (e.g. the metrics)."""

    def __init__(self, clock: Callable[[], float] | None = None, keep_frames: bool = True):
        self._clock = clock
        self._lock = threading.Lock()
        self._seq = 0
        self.keep_frames = keep_frames
        self.frames: list[Frame] = []
        self._subscribers: list[Callable[[Frame], None]] = []

    def subscribe(self, fn: Callable[[Frame], None]) -> None:
        self._subscribers.append(fn)

    def record(self, ctx: TapContext, direction: str, data: bytes, kind: str | None = None) -> Frame:
        with self._lock:
            self._seq += 1
            frame = Frame(
                seq=self._seq,
                t=self._clock() if self._clock else 0.0,
                direction=direction,
                src=ctx.src,
                dst=ctx.dst,
                protocol=ctx.protocol,
                kind=kind or ctx.kind,
                attempt=ctx.attempt,
                data=bytes(data),
            )
            if self.keep_frames:
                self.frames.append(frame)
        for fn in self._subscribers:
            fn(frame)
        return frame

    def contains(self, marker: bytes | str, frames: Iterable[Frame] | None = None) -> list[Frame]:
        """Frames whose raw bytes contain ``marker``."""
        if isinstance(marker, str):
            marker = marker.encode("utf-8")
        return [f for f in (self.frames if frames is None else frames) if marker in f.data]

    def clear(self) -> None:
        with self._lock:
            self.frames.clear()


def byte_class(frame: Frame) -> str | None:
    """Counter a frame is metered under, or ``None`` when excluded."""
    if frame.kind == HANDSHAKE:
        return None
    if frame.kind in (CONTROL, RETRY_OVERHEAD) or frame.attempt > 0:
        return RETRY_OVERHEAD
    return PAYLOAD


@dataclass
class _Histogram:
    buckets: tuple[float, ...] = LATENCY_BUCKETS
    counts: list[int] = field(default_factory=lambda: [0] * (len(LATENCY_BUCKETS) + 1))
    total: float = 0.0
    n: int = 0

    def observe(self, value: float) -> None:
        self.counts[bisect.bisect_left(self.buckets, value)] += 1
        self.total += value
        self.n += 1

    def to_dict(self) -> dict[str, Any]:
        bounds = [str(b) for b in self.buckets] + ["+Inf"]
        return {"buckets": dict(zip(bounds, self.counts)), "sum": self.total, "count": self.n}


class MetricsRegistry:
    """REQUEST_LATENCY / REQUEST_FAILURES / MSG_BYTES_* keyed by MetricLabels."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.latency: dict[MetricLabels, _Histogram] = defaultdict(_Histogram)
        self.failures: dict[MetricLabels, int] = defaultdict(int)
        self.bytes_payload: dict[MetricLabels, int] = defaultdict(int)
        self.bytes_retry_overhead: dict[MetricLabels, int] = defaultdict(int)

    def attach(self, tap: WireTap) -> "MetricsRegistry":
        tap.subscribe(self.meter_frame)
        return self

    def meter_frame(self, frame: Frame) -> None:
        self.meter_bytes(frame.labels, len(frame.data), byte_class(frame))

    def meter_bytes(self, labels: MetricLabels, n: int, cls: str | None) -> None:
        if cls is None:
            return
        with self._lock:
            if cls == PAYLOAD:
                self.bytes_payload[labels] += n
            elif cls == RETRY_OVERHEAD:
                self.bytes_retry_overhead[labels] += n
            else:
                raise ValueError(f"unknown byte class {cls!r}")

    def observe_latency(self, labels: MetricLabels, seconds: float) -> None:
        with self._lock:
            self.latency[labels].observe(seconds)

    def count_failure(self, labels: MetricLabels) -> None:
        with self._lock:
            self.failures[labels] += 1

    def totals(self) -> dict[str, int]:
        return {
            "msg_bytes_payload": sum(self.bytes_payload.values()),
            "msg_bytes_retry_overhead": sum(self.bytes_retry_overhead.values()),
            "request_failures": sum(self.failures.values()),
            "requests": sum(h.n for h in self.latency.values()),
        }

    def export(self) -> dict[str, Any]:
        keys = sorted(
            set(self.latency) | set(self.failures) | set(self.bytes_payload) | set(self.bytes_retry_overhead)
        )
        series = []
        for k in keys:
            series.append(
                {
                    "labels": k._asdict(),
                    "request_latency": self.latency[k].to_dict() if k in self.latency else None,
                    "request_failures": self.failures.get(k, 0),
                    "msg_bytes_payload": self.bytes_payload.get(k, 0),
                    "msg_bytes_retry_overhead": self.bytes_retry_overhead.get(k, 0),
                }
            )
        return {"totals": self.totals(), "series": series}
