"""Scenario configuration, fault schedules and synthetic workloads.

Every duration in :class:`Timing` is given in unscaled seconds and multiplied
by ``time_scale`` when the scenario runs. Service times are a property of the
workload and are not scaled.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from ..envelope import PROTOCOLS
from ..transport import ConfigError

SCENARIOS = ("streaming_queue", "fail_storm", "safety")
ROUTER = "router"


@dataclass(frozen=True)
class Topology:
    kind: str  # "star", "ring" or "point_to_point"
    n: int = 2
    coordinators: int = 1

    @classmethod
    def parse(cls, text: str) -> "Topology":
        """``"ring(8)"``, ``"star(1,4)"`` or ``"point_to_point"``."""
        text = text.replace(" ", "")
        if text == "point_to_point":
            return cls("point_to_point", 2, 0)
        m = re.fullmatch(r"ring\((\d+)\)", text)
        if m:
            return cls("ring", int(m.group(1)), 0)
        m = re.fullmatch(r"star\((\d+),(\d+)\)", text)
        if m:
            return cls("star", int(m.group(2)), int(m.group(1)))
        raise ConfigError(f"unknown topology {text!r}")

    def __str__(self) -> str:
        if self.kind == "ring":
            return f"ring({self.n})"
        if self.kind == "star":
            return f"star({self.coordinators},{self.n})"
        return "point_to_point"

    def node_ids(self) -> list[str]:
        if self.kind == "ring":
            return [f"node-{i}" for i in range(self.n)]
        if self.kind == "star":
            return [f"coordinator-{i}" for i in range(self.coordinators)] + [f"worker-{i}" for i in range(self.n)]
        return ["agent-a", "agent-b"]

    def edges(self) -> list[tuple[str, str]]:
        ids = self.node_ids()
        if self.kind == "ring":
            return [(ids[i], ids[(i + 1) % self.n]) for i in range(self.n)]
        if self.kind == "star":
            hubs, workers = ids[: self.coordinators], ids[self.coordinators:]
            return [(h, w) for h in hubs for w in workers] + [(w, h) for h in hubs for w in workers]
        return [(ids[0], ids[1]), (ids[1], ids[0])]


@dataclass(frozen=True)
class Timing:
    time_scale: float = 1.0
    run_seconds: float | None = None
    fault_cycle_seconds: float = 120.0
    restart_delay_seconds: float = 2.0
    heartbeat_interval: float = 10.0
    heartbeat_timeout: float = 30.0
    message_timeout: float = 30.0
    window_seconds: float = 60.0
    skew_window_seconds: float = 30.0

    def __post_init__(self) -> None:
        if not self.time_scale > 0:
            raise ConfigError("time_scale must be positive")

    def scaled(self, seconds: float) -> float:
        return seconds * self.time_scale

    @property
    def cycle(self) -> float:
        return self.scaled(self.fault_cycle_seconds)

    @property
    def restart_delay(self) -> float:
        return self.scaled(self.restart_delay_seconds)

    @property
    def hb_interval(self) -> float:
        return self.scaled(self.heartbeat_interval)

    @property
    def hb_timeout(self) -> float:
        return self.scaled(self.heartbeat_timeout)

    @property
    def window(self) -> float:
        return self.scaled(self.window_seconds)

    @property
    def skew_window(self) -> float:
        return self.scaled(self.skew_window_seconds)


def service_time(seed: int, task_id: int, mean: float, distribution: str = "uniform") -> float:
    """Seconds of work for one task; a pure function of ``(seed, task_id)``."""
    if distribution == "constant":
        return mean
    rng = random.Random(f"service:{seed}:{task_id}")
    if distribution == "uniform":
        return rng.uniform(0.5 * mean, 1.5 * mean)
    if distribution == "exponential":
        return rng.expovariate(1.0 / mean)
    raise ConfigError(f"unknown service distribution {distribution!r}")


@dataclass(frozen=True)
class SyntheticWorkload:
    n_tasks: int = 1000
    mean_service_seconds: float = 0.005
    service_distribution: str = "uniform"
    n_facts: int = 64
    query_interval_seconds: float = 0.5  # mean gap between fail-storm queries, scaled
    ttl: int = 8

    def service_time(self, seed: int, task_id: int) -> float:
        return service_time(seed, task_id, self.mean_service_seconds, self.service_distribution)

    def facts(self, seed: int) -> dict[str, str]:
        rng = random.Random(f"facts:{seed}")
        return {f"fact-{i:04d}": f"{rng.getrandbits(64):016x}" for i in range(self.n_facts)}

    def shards(self, seed: int, nodes: list[str]) -> dict[str, dict[str, str]]:
        """Round-robin sharding; each key lives on exactly one node."""
        out: dict[str, dict[str, str]] = {n: {} for n in nodes}
        for i, (key, value) in enumerate(sorted(self.facts(seed).items())):
            out[nodes[i % len(nodes)]][key] = value
        return out


@dataclass(frozen=True)
class FaultSchedule:
    cycle_seconds: float
    kill_count: int = 3
    cycles: int = 5
    restart_delay: float = 0.0

    def kill_times(self) -> list[float]:
        return [self.cycle_seconds * (c + 1) for c in range(self.cycles)]

    def victims(self, rng: random.Random, live: list[str]) -> list[str]:
        """Uniform choice without replacement among ``live`` agents."""
        if self.kill_count > len(live):
            raise ConfigError(f"cannot kill {self.kill_count} of {len(live)} live agents")
        return sorted(rng.sample(sorted(live), self.kill_count))


_DEFAULTS: dict[str, dict[str, Any]] = {
    "streaming_queue": {"topology": "star(1,4)", "protocol": "a2a"},
    "fail_storm": {"topology": "ring(8)", "protocol": "a2a"},
    "safety": {"topology": "star(1,2)", "protocol": "anp"},
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    protocol: str = "a2a"  # a wire name, or "router" to delegate to the router
    assignment: Mapping[str, str] = field(default_factory=dict)  # per-node override
    topology: Topology = field(default_factory=lambda: Topology.parse("star(1,4)"))
    workload: SyntheticWorkload = field(default_factory=SyntheticWorkload)
    timing: Timing = field(default_factory=Timing)
    seed: int = 0
    kill_count: int = 3
    cycles: int = 5
    link_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        for p in [self.protocol, *self.assignment.values()]:
            if p not in PROTOCOLS and p != ROUTER:
                raise ConfigError(f"unknown protocol {p!r}")
        if self.scenario == "fail_storm" and self.topology.kind != "ring":
            raise ConfigError("fail_storm runs on a ring")
        if self.scenario == "streaming_queue" and self.topology.kind != "star":
            raise ConfigError("streaming_queue runs on a star")

    @classmethod
    def default(cls, scenario: str, **overrides: Any) -> "ScenarioConfig":
        if scenario not in _DEFAULTS:
            raise ConfigError(f"unknown scenario {scenario!r}")
        base = dict(_DEFAULTS[scenario])
        base.update(overrides)
        return cls.from_dict({"scenario": scenario, **base})

    def protocol_of(self, node: str) -> str:
        return self.assignment.get(node, self.protocol)

    def with_timing(self, **changes: Any) -> "ScenarioConfig":
        return replace(self, timing=replace(self.timing, **changes))

    def run_seconds(self) -> float:
        if self.timing.run_seconds is not None:
            return self.timing.scaled(self.timing.run_seconds)
        return self.timing.cycle * (self.cycles + 1)

    def fault_schedule(self) -> FaultSchedule:
        return FaultSchedule(self.timing.cycle, self.kill_count, self.cycles, self.timing.restart_delay)

    # -- documents

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "protocol": self.protocol,
            "assignment": dict(self.assignment),
            "topology": str(self.topology),
            "workload": asdict(self.workload),
            "timing": asdict(self.timing),
            "seed": self.seed,
            "kill_count": self.kill_count,
            "cycles": self.cycles,
            "link_latency": self.link_latency,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ScenarioConfig":
        known = {
            "scenario", "protocol", "assignment", "topology", "workload",
            "timing", "seed", "kill_count", "cycles", "link_latency",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "scenario" not in doc:
            raise ConfigError("config needs a scenario")
        defaults = _DEFAULTS.get(doc["scenario"], {})
        try:
            return cls(
                scenario=doc["scenario"],
                protocol=str(doc.get("protocol", defaults.get("protocol", "a2a"))).lower(),
                assignment={k: str(v).lower() for k, v in dict(doc.get("assignment", {})).items()},
                topology=Topology.parse(doc.get("topology", defaults.get("topology", "star(1,4)"))),
                workload=SyntheticWorkload(**dict(doc.get("workload", {}))),
                timing=Timing(**dict(doc.get("timing", {}))),
                seed=int(doc.get("seed", 0)),
                kill_count=int(doc.get("kill_count", 3)),
                cycles=int(doc.get("cycles", 5)),
                link_latency=float(doc.get("link_latency", 0.0)),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)
