"""Coordinator/worker queue: workers compete for tasks from one shared queue."""

from __future__ import annotations

import asyncio
from typing import Any

from ..clock import loop_clock, run_virtual
from ..envelope import ErrorCode, ProtocolError, dumps, new_envelope
from ..transport import ConfigError, InProcessNetwork
from ..wire import WireTap
from . import eventlog as ev
from .config import ScenarioConfig
from .eventlog import EventLog
from .network import AgentNetwork, plan_for
from .result import RunResult


def _task_id(i: int) -> str:
    return f"task-{i:05d}"


async def streaming_queue(cfg: ScenarioConfig, *, plan: dict | None = None) -> RunResult:
    if cfg.scenario != "streaming_queue":
        raise ConfigError(f"expected a streaming_queue config, got {cfg.scenario}")
    clock = loop_clock()
    log = EventLog(clock)
    workload = cfg.workload
    plan = plan or plan_for(cfg.topology, cfg.protocol_of)
    hub = cfg.topology.node_ids()[0]
    workers = [n["id"] for n in plan["nodes"] if n["id"] != hub]

    def stream_handler_for(worker: str):
        async def work(e) -> Any:
            task = int(e.content["task"])
            rid = _task_id(task)
            log.record(ev.SERVICE_START, rid, worker)
            await asyncio.sleep(workload.service_time(cfg.seed, task))
            log.record(ev.SERVICE_END, rid, worker)
            yield {"task": task, "result": f"processed-{task}", "worker": worker}

        return work

    def handler_for(worker: str):
        stream = stream_handler_for(worker)

        async def handle(e) -> dict:
            out = None
            async for out in stream(e):
                pass
            return out

        return handle

    net = AgentNetwork(
        plan,
        network=InProcessNetwork(WireTap(clock), latency=cfg.link_latency),
        clock=clock,
        seed=cfg.seed,
        handler_for=handler_for,
        stream_handler_for=stream_handler_for,
        timeout=cfg.timing.message_timeout,
    )
    await net.start(connect=False)
    for w in workers:
        await net.adapter(hub, w)

    queue: asyncio.Queue[int] = asyncio.Queue()
    for i in range(workload.n_tasks):
        log.record(ev.SEND, _task_id(i), hub)
        queue.put_nowait(i)

    async def one(worker: str, task: int) -> None:
        rid = _task_id(task)
        adapter = await net.adapter(hub, worker)
        e = new_envelope(hub, worker, {"task": task}, intent="process", ids=net.ids, clock=clock)
        if adapter.supports_streaming:
            last = None
            async for fragment in adapter.send_streaming(e):
                if fragment.envelope is None:
                    break
                if last is None:
                    log.record(ev.FIRST_TOKEN, rid, worker)
                last = fragment.envelope
            if last is None:
                raise ProtocolError.of(ErrorCode.E_PROTOCOL, "stream carried no result")
        else:
            last = await adapter.send(e)
            log.record(ev.FIRST_TOKEN, rid, worker)
        log.record(ev.DONE, rid, worker, bytes=len(dumps(last.content)))

    async def dispatcher(worker: str) -> None:
        while True:
            try:
                task = queue.get_nowait()
            except asyncio.QueueEmpty:
                return
            log.record(ev.QUEUE_START, _task_id(task), worker)
            try:
                await asyncio.wait_for(one(worker, task), cfg.timing.message_timeout)
            except asyncio.TimeoutError:
                log.record(ev.FAIL, _task_id(task), worker, error=ErrorCode.E_TIMEOUT.value)
            except ProtocolError as err:
                log.record(ev.FAIL, _task_id(task), worker, error=err.kind.value)

    await asyncio.gather(*(dispatcher(w) for w in workers))
    totals = net.metrics.totals()
    await net.close()
    return RunResult(cfg, log, totals, {"workers": workers, "coordinator": hub})


def run_streaming_queue(cfg: ScenarioConfig, **kwargs: Any) -> RunResult:
    """Run on a virtual clock; the event log is identical across reruns."""
    return run_virtual(streaming_queue(cfg, **kwargs))
