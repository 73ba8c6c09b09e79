"""Ring of agents under cyclic kills: sharded fact lookup with TTL forwarding.

Each node owns a shard of synthetic facts. A query enters at one node, which
spends the task's service time and then walks the ring: answer locally, or
hand the query to the next successor believed alive. A failed send marks
the successor dead and the walk moves on; a rejoining node announces itself
to every peer before it counts as reconnected.
"""

from __future__ import annotations

import asyncio
import random
from dataclasses import dataclass
from typing import Any

from ..bridge import BridgedAdapter
from ..clock import loop_clock, run_virtual
from ..envelope import ErrorCode, ProtocolError, dumps, new_envelope
from ..pal import Adapter
from ..protocols.anp import ANPAdapter
from ..transport import ConfigError, InProcessNetwork
from ..wire import WireTap
from . import eventlog as ev
from .config import ScenarioConfig
from .eventlog import EventLog
from .network import AgentNetwork, plan_for
from .result import RunResult

CLIENT = "client"
NOT_FOUND = "answer-not-found"
_DEATH = (ErrorCode.E_CONN, ErrorCode.E_TIMEOUT)


@dataclass(frozen=True)
class Query:
    request_id: str
    index: int
    t: float
    entry: str
    key: str


def query_schedule(cfg: ScenarioConfig) -> list[Query]:
    """Seeded query stream: exponential gaps, uniform entry node and key."""
    ring = cfg.topology.node_ids()
    keys = sorted(cfg.workload.facts(cfg.seed))
    rng = random.Random(f"queries:{cfg.seed}")
    gap = cfg.timing.scaled(cfg.workload.query_interval_seconds)
    end = cfg.run_seconds()
    out: list[Query] = []
    t = 0.0
    while True:
        t += rng.expovariate(1.0 / gap)
        if t >= end:
            return out
        out.append(Query(f"q-{len(out):05d}", len(out), t, rng.choice(ring), rng.choice(keys)))


def owner_of(cfg: ScenarioConfig) -> dict[str, str]:
    shards = cfg.workload.shards(cfg.seed, cfg.topology.node_ids())
    return {key: node for node, facts in shards.items() for key in facts}


async def probe_alive(adapter: Adapter) -> bool:
    inner = adapter.inner if isinstance(adapter, BridgedAdapter) else adapter
    if isinstance(inner, ANPAdapter) and inner.secure:
        try:
            await inner.heartbeat()
        except ProtocolError:
            return False
        return inner.detect_failure() == "alive"
    return await adapter.health_check()


class RingNode:
    """Application state of one ring member for one lifetime (until killed)."""

    def __init__(self, storm: "FailStorm", node_id: str, ready: bool):
        self.storm = storm
        self.node_id = node_id
        ring = storm.ring
        i = ring.index(node_id)
        self.successors = [ring[(i + k) % len(ring)] for k in range(1, len(ring))]
        self.shard = storm.shards[node_id]
        # Optimistic view: peers count as alive until a send or heartbeat fails.
        self.view = {n: True for n in self.successors}
        self.ready = ready
        self.tasks: list[asyncio.Task] = []

    def start_heartbeats(self) -> None:
        if self.storm.cfg.timing.hb_interval > 0:
            self.tasks.append(asyncio.ensure_future(self._heartbeats()))

    def stop(self) -> None:
        for task in self.tasks:
            task.cancel()
        self.tasks.clear()

    async def _mark_dead(self, peer: str) -> None:
        self.view[peer] = False
        await self.storm.net.drop_adapter(self.node_id, peer)

    async def _heartbeats(self) -> None:
        net = self.storm.net
        while True:
            await asyncio.sleep(self.storm.cfg.timing.hb_interval)
            succ = next((s for s in self.successors if self.view[s]), None)
            if succ is None:
                continue
            try:
                alive = await probe_alive(await net.adapter(self.node_id, succ))
            except ProtocolError:
                alive = False
            if not alive:
                await self._mark_dead(succ)

    async def handle(self, e) -> dict[str, Any]:
        op = e.content.get("op")
        if op == "join":
            peer = e.content["node"]
            self.view[peer] = True
            await self.storm.net.drop_adapter(self.node_id, peer)
            return {"ok": True}
        if op != "query":
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, f"unknown op {op!r}")
        if not self.ready:
            raise ProtocolError.of(ErrorCode.E_HTTP, "rejoining", 503)
        q = e.content
        if q["hops"] == 0:
            self.storm.log.record(ev.SERVICE_START, q["request_id"], self.node_id)
            await asyncio.sleep(self.storm.service_time(q["index"]))
            self.storm.log.record(ev.SERVICE_END, q["request_id"], self.node_id)
        return await self.lookup(q)

    async def lookup(self, q: dict[str, Any]) -> dict[str, Any]:
        if q["key"] in self.shard:
            return {"found": True, "value": self.shard[q["key"]], "owner": self.node_id, "hops": q["hops"]}
        if q["ttl"] <= 0:
            return {"found": False, "reason": "ttl exhausted", "hops": q["hops"]}
        net = self.storm.net
        for succ in self.successors:
            if not self.view[succ]:
                continue
            forward = {**q, "ttl": q["ttl"] - 1, "hops": q["hops"] + 1}
            try:
                adapter = await net.adapter(self.node_id, succ)
                reply = await adapter.send(
                    new_envelope(self.node_id, succ, forward, intent="lookup", ids=net.ids, clock=self.storm.clock)
                )
            except ProtocolError as err:
                if err.kind in _DEATH:
                    await self._mark_dead(succ)
                continue
            return reply.content
        return {"found": False, "reason": "no live successor", "hops": q["hops"]}

    async def rejoin(self) -> None:
        """Announce to every peer, then start serving queries."""
        net = self.storm.net
        for peer in self.successors:
            try:
                adapter = await net.adapter(self.node_id, peer)
                await adapter.send(
                    new_envelope(
                        self.node_id, peer, {"op": "join", "node": self.node_id},
                        intent="join", ids=net.ids, clock=self.storm.clock,
                    )
                )
            except ProtocolError:
                await self._mark_dead(peer)
        self.ready = True


class FailStorm:
    def __init__(self, cfg: ScenarioConfig, plan: dict | None = None):
        if cfg.scenario != "fail_storm":
            raise ConfigError(f"expected a fail_storm config, got {cfg.scenario}")
        self.cfg = cfg
        self.clock = loop_clock()
        self.log = EventLog(self.clock)
        self.ring = cfg.topology.node_ids()
        self.shards = cfg.workload.shards(cfg.seed, self.ring)
        self.members: dict[str, RingNode] = {}
        self.cycles: list[dict[str, Any]] = []
        self.net = AgentNetwork(
            plan or plan_for(cfg.topology, cfg.protocol_of),
            network=InProcessNetwork(WireTap(self.clock), latency=cfg.link_latency),
            clock=self.clock,
            seed=cfg.seed,
            handler_for=lambda node: self.members[node].handle,
            timeout=cfg.timing.message_timeout,
            anp_options={"heartbeat_timeout": cfg.timing.hb_timeout},
            allow_insecure=True,
        )

    def service_time(self, index: int) -> float:
        return self.cfg.workload.service_time(self.cfg.seed, index)

    async def _query(self, q: Query) -> None:
        self.log.record(ev.SEND, q.request_id, q.entry)
        content = {"op": "query", "request_id": q.request_id, "index": q.index, "key": q.key,
                   "ttl": self.cfg.workload.ttl, "hops": 0}
        try:
            adapter = await self.net.adapter(CLIENT, q.entry)
            reply = await adapter.send(
                new_envelope(CLIENT, q.entry, content, intent="query", ids=self.net.ids, clock=self.clock)
            )
        except ProtocolError as err:
            await self.net.drop_adapter(CLIENT, q.entry)
            self.log.record(ev.FAIL, q.request_id, q.entry, error=err.kind.value)
            return
        if reply.content.get("found"):
            self.log.record(ev.DONE, q.request_id, reply.content["owner"], bytes=len(dumps(reply.content)))
        else:
            self.log.record(ev.FAIL, q.request_id, q.entry, error=NOT_FOUND)

    async def _clients(self) -> None:
        tasks = []
        for q in query_schedule(self.cfg):
            await asyncio.sleep(max(0.0, q.t - self.clock()))
            tasks.append(asyncio.ensure_future(self._query(q)))
        await asyncio.gather(*tasks)

    async def _faults(self) -> None:
        schedule = self.cfg.fault_schedule()
        rng = random.Random(f"victims:{self.cfg.seed}")
        rejoins = []
        for k in schedule.kill_times():
            if k >= self.cfg.run_seconds():
                break
            await asyncio.sleep(max(0.0, k - self.clock()))
            live = [n for n in self.ring if self.net.is_up(n)]
            victims = schedule.victims(rng, live)
            cycle = {"kill_t": self.clock(), "victims": victims, "reconnect_t": {}}
            self.cycles.append(cycle)
            for v in victims:
                self.log.record(ev.KILL, "", v)
                self.members[v].stop()
                await self.net.kill(v)
            rejoins.append(asyncio.ensure_future(self._rejoin(cycle)))
        await asyncio.gather(*rejoins)

    async def _rejoin(self, cycle: dict[str, Any]) -> None:
        await asyncio.sleep(self.cfg.timing.restart_delay)
        for v in cycle["victims"]:
            self.members[v] = RingNode(self, v, ready=False)
            await self.net.restart(v)
        for v in cycle["victims"]:
            member = self.members[v]
            await member.rejoin()
            self.log.record(ev.RECONNECT, "", v)
            cycle["reconnect_t"][v] = self.clock()
            member.start_heartbeats()
        cycle["ttr"] = ev.duration(cycle["kill_t"], max(cycle["reconnect_t"].values()))

    async def run(self) -> RunResult:
        for node in self.ring:
            self.members[node] = RingNode(self, node, ready=True)
        await self.net.start()
        for member in self.members.values():
            member.start_heartbeats()
        await asyncio.gather(self._clients(), self._faults())
        for member in self.members.values():
            member.stop()
        totals = self.net.metrics.totals()
        await self.net.close()
        details = {"ring": self.ring, "cycles": self.cycles, "restart_delay": self.cfg.timing.restart_delay}
        return RunResult(self.cfg, self.log, totals, details)


async def fail_storm(cfg: ScenarioConfig, *, plan: dict | None = None) -> RunResult:
    return await FailStorm(cfg, plan).run()


def run_fail_storm(cfg: ScenarioConfig, **kwargs: Any) -> RunResult:
    return run_virtual(fail_storm(cfg, **kwargs))


# --------------------------------------------------------------------------- oracle


def dead_intervals(log: EventLog) -> dict[str, list[tuple[float, float]]]:
    """Per agent, ``[kill, reconnect)`` intervals read back from the log."""
    out: dict[str, list[tuple[float, float]]] = {}
    open_kill: dict[str, float] = {}
    for e in log.of_kind(ev.KILL, ev.RECONNECT):
        if e.kind == ev.KILL:
            open_kill[e.agent] = e.t
        elif e.agent in open_kill:
            out.setdefault(e.agent, []).append((open_kill.pop(e.agent), e.t))
    for agent, k in open_kill.items():
        out.setdefault(agent, []).append((k, float("inf")))
    return out


def reachability_oracle(cfg: ScenarioConfig, log: EventLog) -> dict[str, bool]:
    """Expected answer-found outcome of every scheduled query.

    A query succeeds iff its entry node stays up from arrival to the end of
    its service time, and the owning shard is reached from the entry within
    TTL hops, walking the ring over nodes alive at that moment.
    """
    ring = cfg.topology.node_ids()
    owner = owner_of(cfg)
    dead = dead_intervals(log)

    def alive_at(node: str, t: float) -> bool:
        return not any(k <= t < r for k, r in dead.get(node, ()))

    def up_throughout(node: str, t0: float, t1: float) -> bool:
        return not any(k <= t1 and r > t0 for k, r in dead.get(node, ()))

    expected = {}
    for q in query_schedule(cfg):
        t1 = q.t + cfg.workload.service_time(cfg.seed, q.index)
        if not up_throughout(q.entry, q.t, t1):
            expected[q.request_id] = False
            continue
        cur, ttl, found = q.entry, cfg.workload.ttl, False
        while True:
            if owner[q.key] == cur:
                found = True
                break
            if ttl <= 0:
                break
            i = ring.index(cur)
            nxt = next((ring[(i + s) % len(ring)] for s in range(1, len(ring)) if alive_at(ring[(i + s) % len(ring)], t1)), None)
            if nxt is None:
                break
            cur, ttl = nxt, ttl - 1
        expected[q.request_id] = found
    return expected


def observed_outcomes(log: EventLog) -> dict[str, bool]:
    out = {}
    for e in log.of_kind(ev.DONE, ev.FAIL):
        out.setdefault(e.request_id, e.kind == ev.DONE)
    return out
