"""Brute-force recomputations used as independent oracles for the metrics module.

Each function re-derives a metric straight from the raw event list, with no
shared helpers: statistics-module summaries, counting-based percentiles,
Decimal time differences and explicit window predicates.
"""

from __future__ import annotations

import statistics
from decimal import ROUND_HALF_EVEN, Decimal


def latencies(events) -> dict[str, float]:
    send, done = {}, {}
    for e in events:
        if e.kind == "send":
            send.setdefault(e.request_id, e.t)
        elif e.kind == "done":
            done.setdefault(e.request_id, e.t)
    return {rid: done[rid] - send[rid] for rid in send if rid in done}


def p95(values) -> float:
    """Smallest value with at least 95% of the sample at or below it."""
    n = len(values)
    for x in sorted(values):
        if 100 * sum(1 for v in values if v <= x) >= 95 * n:
            return x
    raise AssertionError("unreachable")


def summary(values) -> dict[str, float]:
    return {
        "mean": statistics.mean(values),
        "min": min(values),
        "max": max(values),
        "median": statistics.median(values),
        "std_dev": statistics.pstdev(values),
        "p95": p95(values),
    }


def duration_minutes(events) -> float:
    sends = [e.t for e in events if e.kind == "send"]
    dones = [e.t for e in events if e.kind == "done"]
    if not sends or not dones:
        return 0.0
    return (max(dones) - min(sends)) / 60


def nanosecond_difference(start: float, end: float) -> float:
    exact = Decimal(end) - Decimal(start)
    return float(exact.quantize(Decimal("1e-9"), rounding=ROUND_HALF_EVEN))


def cycles(events, window: float):
    """``[(ttr, retention or None)]`` per kill instant, from first principles."""
    kill_times = sorted({e.t for e in events if e.kind == "kill"})
    out = []
    for i, k in enumerate(kill_times):
        victims = [e.agent for e in events if e.kind == "kill" and e.t == k]
        r = max(min(e.t for e in events if e.kind == "reconnect" and e.agent == v and e.t >= k) for v in victims)
        nxt = kill_times[i + 1] if i + 1 < len(kill_times) else None
        dones = [e.t for e in events if e.kind == "done"]
        pre = sum(1 for t in dones if k - window <= t < k)
        if nxt is not None and nxt <= r + window:
            post = sum(1 for t in dones if r < t < nxt)
        else:
            post = sum(1 for t in dones if r < t <= r + window)
        out.append((nanosecond_difference(k, r), post / pre if pre else None))
    return out
