"""Scenario metrics computed from event logs.

Summary statistics use exact rational arithmetic and round once, so every
value is the correctly rounded float of its mathematical definition.
Percentiles are nearest-rank; the standard deviation is the population one.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction
from statistics import NormalDist
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .harness import eventlog as ev
from .harness.eventlog import EventLog

log = logging.getLogger(__name__)

METHODS = {"percentile": "nearest-rank", "std_dev": "population", "ci": "BCa bootstrap"}


# --------------------------------------------------------------------------- latency


@dataclass(frozen=True)
class LatencySummary:
    mean: float
    min: float
    max: float
    std_dev: float
    median: float
    p95: float
    n: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def e2e_latency(log_: EventLog, request_id: str) -> float:
    """``t_done - t_send`` for one request; incomplete requests raise ``KeyError``."""
    kinds = log_.by_request().get(request_id, {})
    if ev.SEND not in kinds or ev.DONE not in kinds:
        raise KeyError(f"request {request_id} has no send/done pair")
    return kinds[ev.DONE].t - kinds[ev.SEND].t


def e2e_latencies(log_: EventLog) -> tuple[dict[str, float], list[str]]:
    """Latency per completed request, plus the ids of incomplete ones (failures)."""
    done, failed = {}, []
    for rid, kinds in sorted(log_.by_request().items()):
        if ev.SEND not in kinds:
            continue
        if ev.DONE in kinds:
            done[rid] = kinds[ev.DONE].t - kinds[ev.SEND].t
        else:
            failed.append(rid)
    return done, failed


def run_duration_minutes(log_: EventLog) -> float:
    sends = [e.t for e in log_.of_kind(ev.SEND)]
    dones = [e.t for e in log_.of_kind(ev.DONE)]
    if not sends or not dones:
        log.warning("duration of a run without completed requests is reported as 0")
        return 0.0
    return (max(dones) - min(sends)) / 60


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    """Order statistic at 1-based rank ``ceil(q * n)``."""
    if not sorted_values:
        raise ValueError("no values")
    rank = math.ceil(Fraction(str(q)) * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


def _exact_mean(values: Sequence[float]) -> Fraction:
    return sum(map(Fraction, values), Fraction(0)) / len(values)


def summarize_latencies(values: Iterable[float]) -> LatencySummary:
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("cannot summarize an empty latency set")
    n = len(xs)
    mean = _exact_mean(xs)
    variance = sum(((Fraction(x) - mean) ** 2 for x in xs), Fraction(0)) / n
    mid = n // 2
    median = xs[mid] if n % 2 else (xs[mid - 1] + xs[mid]) / 2
    return LatencySummary(float(mean), xs[0], xs[-1], math.sqrt(float(variance)), median, nearest_rank(xs, 0.95), n)


# --------------------------------------------------------------------------- recovery


@dataclass(frozen=True)
class Window:
    start: float
    end: float
    closed_start: bool
    closed_end: bool

    def __contains__(self, t: float) -> bool:
        lo = t >= self.start if self.closed_start else t > self.start
        hi = t <= self.end if self.closed_end else t < self.end
        return lo and hi


@dataclass(frozen=True)
class FaultWindows:
    pre: Window
    recovery: Window
    post: Window


def fault_windows(k_t: float, r_t: float, next_k: float | None = None, window: float = 60.0) -> FaultWindows:
    """Pre ``[k-W, k)``, recovery ``[k, r]``, post ``(r, r+W]`` cut short by the next kill."""
    if r_t < k_t:
        raise ValueError(f"reconnect {r_t} precedes kill {k_t}")
    post = Window(r_t, r_t + window, False, True)
    if next_k is not None and next_k <= r_t + window:
        post = Window(r_t, next_k, False, False)
    return FaultWindows(Window(k_t - window, k_t, True, False), Window(k_t, r_t, True, True), post)


def ttr(k_t: float, r_t: float) -> float:
    if r_t < k_t:
        raise ValueError(f"reconnect {r_t} precedes kill {k_t}")
    return ev.duration(k_t, r_t)


def retention(pre_n: int, post_n: int) -> float | None:
    """``post / pre``; ``None`` stands for NA (no successes before the kill)."""
    if pre_n == 0:
        return None
    return post_n / pre_n


@dataclass(frozen=True)
class RecoveryCycle:
    kill_t: float
    reconnect_t: float
    victims: tuple[str, ...]
    ttr_seconds: float
    pre_success_count: int
    post_success_count: int
    retention: float | None
    pre_latency_median: float | None
    post_latency_median: float | None

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["victims"] = list(self.victims)
        doc["retention"] = "NA" if self.retention is None else self.retention
        return doc


def kill_cycles(log_: EventLog) -> list[tuple[float, float, tuple[str, ...]]]:
    """``(k, r, victims)`` per kill instant; ``r`` is the last victim's reconnect."""
    kills: dict[float, list[str]] = {}
    for e in log_.of_kind(ev.KILL):
        kills.setdefault(e.t, []).append(e.agent)
    reconnects = log_.of_kind(ev.RECONNECT)
    cycles = []
    for k, victims in sorted(kills.items()):
        times = []
        for v in victims:
            r = next((e.t for e in reconnects if e.agent == v and e.t >= k), None)
            if r is None:
                break
            times.append(r)
        else:
            cycles.append((k, max(times), tuple(victims)))
    return cycles


def recovery_report(log_: EventLog, window: float = 60.0) -> list[RecoveryCycle]:
    latencies, _ = e2e_latencies(log_)
    done = [(e.t, latencies.get(e.request_id)) for e in log_.of_kind(ev.DONE)]
    cycles = kill_cycles(log_)
    out = []
    for i, (k, r, victims) in enumerate(cycles):
        next_k = cycles[i + 1][0] if i + 1 < len(cycles) else None
        w = fault_windows(k, r, next_k, window)
        pre = [lat for t, lat in done if t in w.pre]
        post = [lat for t, lat in done if t in w.post]
        out.append(
            RecoveryCycle(
                k, r, victims, ttr(k, r), len(pre), len(post), retention(len(pre), len(post)),
                _median([x for x in pre if x is not None]), _median([x for x in post if x is not None]),
            )
        )
    return out


def aggregate_retention(cycles: Iterable[RecoveryCycle]) -> float | None:
    """Mean retention over cycles, NA cycles excluded."""
    values = [c.retention for c in cycles if c.retention is not None]
    return float(_exact_mean(values)) if values else None


def _median(xs: list[float]) -> float | None:
    if not xs:
        return None
    xs = sorted(xs)
    mid = len(xs) // 2
    return xs[mid] if len(xs) % 2 else (xs[mid - 1] + xs[mid]) / 2


# --------------------------------------------------------------------------- load balance


def worker_counts(log_: EventLog, workers: Iterable[str] = ()) -> dict[str, int]:
    counts = Counter({w: 0 for w in workers})
    counts.update(e.agent for e in log_.of_kind(ev.DONE))
    return dict(sorted(counts.items()))


def population_variance(values: Sequence[float]) -> float:
    if not values:
        return 0.0
    mean = _exact_mean(values)
    return float(sum(((Fraction(v) - mean) ** 2 for v in values), Fraction(0)) / len(values))


def load_balance_variance(log_: EventLog, workers: Iterable[str] = ()) -> float:
    return population_variance(list(worker_counts(log_, workers).values()))


# --------------------------------------------------------------------------- bootstrap


def _mean_rows(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1)


def bootstrap_ci(
    values: Sequence[float],
    B: int = 10_000,
    level: float = 0.95,
    seed: int | None = 0,
    statistic: Callable[[np.ndarray], np.ndarray] = _mean_rows,
) -> tuple[float, float]:
    """Bias-corrected and accelerated bootstrap interval.

    ``statistic`` maps an array of shape ``(..., n)`` to shape ``(...)``.
    Bias correction comes from where the sample statistic sits in the
    bootstrap distribution; acceleration from the jackknife skewness.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("bootstrap needs at least one value")
    theta = float(statistic(x))
    if np.all(x == x[0]):
        return theta, theta
    rng = np.random.default_rng(seed)
    boot = np.empty(B)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, B, chunk):
        size = min(chunk, B - start)
        boot[start:start + size] = statistic(x[rng.integers(0, n, size=(size, n))])

    norm = NormalDist()
    frac = float(np.mean(boot < theta))
    if frac <= 0.0 or frac >= 1.0:
        # The sample statistic sits outside the bootstrap support; BCa is undefined.
        log.warning("degenerate bootstrap distribution; falling back to the percentile interval")
        lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
        return float(np.percentile(boot, 100 * lo_q)), float(np.percentile(boot, 100 * hi_q))
    z0 = norm.inv_cdf(frac)

    jack = statistic(np.stack([np.delete(x, i) for i in range(n)]))
    diff = jack.mean() - jack
    denom = 6.0 * float(np.sum(diff**2)) ** 1.5
    a = float(np.sum(diff**3)) / denom if denom > 0 else 0.0

    def adjusted(q: float) -> float:
        z = norm.inv_cdf(q)
        return norm.cdf(z0 + (z0 + z) / (1 - a * (z0 + z)))

    lo_q, hi_q = adjusted((1 - level) / 2), adjusted((1 + level) / 2)
    return float(np.percentile(boot, 100 * lo_q)), float(np.percentile(boot, 100 * hi_q))


# --------------------------------------------------------------------------- reports


def run_report(
    log_: EventLog,
    *,
    scenario: str,
    protocol: str,
    byte_totals: Mapping[str, int] | None = None,
    workers: Iterable[str] = (),
    window: float = 60.0,
    ci_resamples: int = 2_000,
    seed: int = 0,
) -> dict[str, Any]:
    latencies, failed = e2e_latencies(log_)
    values = list(latencies.values())
    total = len(values) + len(failed)
    report: dict[str, Any] = {
        "scenario": scenario,
        "protocol": protocol,
        "requests": total,
        "completed": len(values),
        "failed": len(failed),
        "success_rate": len(values) / total if total else None,
        "duration_min": run_duration_minutes(log_),
        "latency": summarize_latencies(values).to_dict() if values else None,
        "latency_mean_ci95": list(bootstrap_ci(values, B=ci_resamples, seed=seed)) if values else None,
        "msg_bytes_payload": int((byte_totals or {}).get("msg_bytes_payload", 0)),
        "msg_bytes_retry_overhead": int((byte_totals or {}).get("msg_bytes_retry_overhead", 0)),
        "methods": dict(METHODS),
    }
    if scenario == "streaming_queue":
        report["worker_counts"] = worker_counts(log_, workers)
        report["load_balance_variance"] = load_balance_variance(log_, workers)
    if log_.of_kind(ev.KILL):
        cycles = recovery_report(log_, window)
        report["recovery"] = [c.to_dict() for c in cycles]
        report["retention_mean"] = aggregate_retention(cycles)
        report["ttr_median"] = _median([c.ttr_seconds for c in cycles])
    return report


def latency_csv(log_: EventLog) -> str:
    latencies, failed = e2e_latencies(log_)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["request_id", "e2e_latency_s", "status"])
    for rid, value in latencies.items():
        writer.writerow([rid, repr(value), "done"])
    for rid in failed:
        writer.writerow([rid, "", "failed"])
    return buf.getvalue()


MERGE_KEYS = ("success_rate", "duration_min", "retention_mean", "ttr_median", "load_balance_variance")


def merge_reports(reports: Sequence[Mapping[str, Any]], *, B: int = 10_000, seed: int = 0) -> dict[str, Any]:
    """Per-scenario aggregation: median across runs with a BCa interval on the median."""
    groups: dict[tuple[str, str], list[Mapping[str, Any]]] = {}
    for r in reports:
        groups.setdefault((r["scenario"], r["protocol"]), []).append(r)
    merged = []
    for (scenario, protocol), runs in sorted(groups.items()):
        entry: dict[str, Any] = {"scenario": scenario, "protocol": protocol, "runs": len(runs)}
        series = {k: [r[k] for r in runs if r.get(k) is not None] for k in MERGE_KEYS}
        series["latency_mean"] = [r["latency"]["mean"] for r in runs if r.get("latency")]
        series["latency_p95"] = [r["latency"]["p95"] for r in runs if r.get("latency")]
        for key, xs in series.items():
            if not xs:
                continue
            ci = bootstrap_ci(xs, B=B, seed=seed, statistic=lambda a: np.median(a, axis=-1))
            entry[key] = {"median": _median(list(xs)), "ci95": list(ci)}
        merged.append(entry)
    return {"groups": merged, "methods": dict(METHODS)}
