"""Turns a network plan into running servers, egress adapters and bridges."""

from __future__ import annotations

import asyncio
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from ..bridge import BridgedAdapter, BridgeSpec, install_bridges
from ..envelope import IdFactory, ProtocolError
from ..pal import Adapter, AdapterDescriptor, CodecRegistry
from ..protocols import ADAPTERS, SERVERS, default_codecs
from ..protocols.anp import ANPAdapter
from ..protocols.anp_crypto import Identity, create_identity
from ..protocols.base import AgentServer, Handler, StreamHandler
from ..router.cfm import wire_name
from ..transport import ConfigError, InProcessNetwork, Network, TcpNetwork
from ..wire import MetricsRegistry

log = logging.getLogger(__name__)

PORT_BASE_ENV = "PROTOMESH_PORT_BASE"
DEFAULT_PORT_BASE = 18400


def plan_for(topology, protocol_of: Callable[[str], str]) -> dict[str, list]:
    """Network plan (same shape the router emits) for a fixed topology."""
    nodes = [{"id": n, "protocol": protocol_of(n), "features": []} for n in topology.node_ids()]
    proto = {n["id"]: n["protocol"] for n in nodes}
    links = [{"src": a, "dst": b, "protocol": [proto[a], proto[b]]} for a, b in topology.edges()]
    bridges = [s.to_plan_entry() for s in install_bridges({"links": links}, allow_insecure=True)]
    return {"nodes": nodes, "links": links, "bridges": bridges}


@dataclass
class Node:
    node_id: str
    protocol: str
    address: str
    identity: Identity | None = None
    server: AgentServer | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def endpoint(self) -> str:
        return f"http://{self.address}"


class AgentNetwork:
    """Servers for every plan node plus a cache of client adapters per directed edge."""

    def __init__(
        self,
        plan: Mapping[str, Any],
        *,
        network: Network | None = None,
        clock: Callable[[], float] | None = None,
        seed: int = 0,
        handler_for: Callable[[str], Handler] | None = None,
        stream_handler_for: Callable[[str], StreamHandler] | None = None,
        auth_tokens: set[str] | None = None,
        credentials: str | None = None,
        allow_insecure: bool = False,
        timeout: float = 30.0,
        max_skew: float | None = 30.0,
        anp_options: Mapping[str, Any] | None = None,
        server_options: Mapping[str, Any] | None = None,
        codecs: CodecRegistry | None = None,
    ):
        self.network = network or InProcessNetwork()
        self.tap = self.network.tap
        self.metrics = MetricsRegistry().attach(self.tap)
        self.clock = clock
        self.seed = seed
        self.ids = IdFactory(seed)
        self.codecs = codecs or default_codecs()
        self.handler_for = handler_for
        self.stream_handler_for = stream_handler_for
        self.auth_tokens = auth_tokens
        self.credentials = credentials
        self.allow_insecure = allow_insecure
        self.timeout = timeout
        self.max_skew = max_skew
        self.anp_options = dict(anp_options or {})
        self.server_options = dict(server_options or {})
        self.links = [(link["src"], link["dst"]) for link in plan.get("links", ())]
        self.bridges: list[BridgeSpec] = install_bridges(plan, allow_insecure=allow_insecure)
        self.nodes: dict[str, Node] = {}
        self.adapters: dict[tuple[str, str], Adapter] = {}
        self._client_identities: dict[str, Identity] = {}
        self._locks: dict[tuple[str, str], asyncio.Lock] = {}
        tcp = isinstance(self.network, TcpNetwork)
        base = int(os.environ.get(PORT_BASE_ENV, DEFAULT_PORT_BASE))
        for i, spec in enumerate(plan.get("nodes", ())):
            node_id = spec["id"]
            if node_id in self.nodes:
                raise ConfigError(f"duplicate node {node_id}")
            protocol = wire_name(spec["protocol"])
            if protocol not in SERVERS:
                raise ConfigError(f"unknown protocol {spec['protocol']!r} for {node_id}")
            address = f"127.0.0.1:{base + i}" if tcp else f"{node_id}.mesh:80"
            identity = create_identity(seed * 100_003 + i) if protocol == "anp" else None
            self.nodes[node_id] = Node(node_id, protocol, address, identity)

    # -- servers

    def _make_server(self, node: Node) -> AgentServer:
        kwargs: dict[str, Any] = {
            "clock": self.clock,
            "ids": IdFactory(f"{self.seed}:{node.node_id}:{len(node.extra.get('epochs', ()))}"),
            "auth_tokens": self.auth_tokens,
            "max_skew": self.max_skew,
            **self.server_options,
        }
        if self.stream_handler_for is not None:
            kwargs["stream_handler"] = self.stream_handler_for(node.node_id)
        if node.protocol == "anp":
            kwargs["identity"] = node.identity
        handler = self.handler_for(node.node_id) if self.handler_for else None
        return SERVERS[node.protocol](node.node_id, handler, **kwargs)

    async def start_node(self, node_id: str) -> AgentServer:
        node = self.nodes[node_id]
        node.server = self._make_server(node)
        node.extra.setdefault("epochs", []).append(node.server)
        await self.network.serve(node.address, node.server)
        return node.server

    async def start(self, *, connect: bool = True) -> "AgentNetwork":
        for node_id in self.nodes:
            await self.start_node(node_id)
        if connect:
            for src, dst in self.links:
                await self.adapter(src, dst)
        return self

    def is_up(self, node_id: str) -> bool:
        return self.network.is_up(self.nodes[node_id].address)

    async def kill(self, node_id: str) -> None:
        """Abrupt stop; the node's own egress adapters die with it."""
        await self.network.stop(self.nodes[node_id].address)
        for key in [k for k in self.adapters if k[0] == node_id]:
            await self.drop_adapter(*key)

    async def restart(self, node_id: str) -> AgentServer:
        return await self.start_node(node_id)

    # -- adapters

    def _identity(self, agent: str) -> Identity:
        if agent in self.nodes and self.nodes[agent].identity is not None:
            return self.nodes[agent].identity
        if agent not in self._client_identities:
            self._client_identities[agent] = create_identity(self.seed * 100_003 + 50_000 + len(self._client_identities))
        return self._client_identities[agent]

    def src_protocol(self, src: str, dst: str) -> str:
        return self.nodes[src].protocol if src in self.nodes else self.nodes[dst].protocol

    def make_adapter(self, src: str, dst: str, *, credentials: str | None = None, **options: Any) -> Adapter:
        """Fresh, uninitialized adapter for ``src -> dst``; bridged when protocols differ."""
        target = self.nodes[dst]
        descriptor = AdapterDescriptor(
            target.protocol, dst, target.endpoint, credentials if credentials is not None else self.credentials
        )
        kwargs: dict[str, Any] = {"src_agent": src, "metrics": self.metrics, "clock": self.clock, "timeout": self.timeout}
        if target.protocol == "anp":
            kwargs.update(identity=self._identity(src), expected_did=target.identity.did, **self.anp_options)
        kwargs.update(options)
        inner = ADAPTERS[target.protocol](descriptor, self.network, self.codecs, **kwargs)
        src_p = self.src_protocol(src, dst)
        if src_p == target.protocol:
            return inner
        spec = BridgeSpec(src, dst, src_p, target.protocol, True, self.allow_insecure)
        return BridgedAdapter(inner, spec, self.codecs)

    async def adapter(self, src: str, dst: str) -> Adapter:
        """Cached initialized adapter; a dead ANP session is replaced transparently."""
        key = (src, dst)
        lock = self._locks.setdefault(key, asyncio.Lock())
        async with lock:
            adapter = self.adapters.get(key)
            if adapter is not None and not adapter.closed and not _session_dead(adapter):
                return adapter
            if adapter is not None:
                await self.drop_adapter(src, dst)
            adapter = self.make_adapter(src, dst)
            await adapter.initialize()
            self.adapters[key] = adapter
            return adapter

    async def drop_adapter(self, src: str, dst: str) -> None:
        adapter = self.adapters.pop((src, dst), None)
        if adapter is not None:
            try:
                await adapter.cleanup()
            except ProtocolError:
                pass

    async def close(self) -> None:
        for key in list(self.adapters):
            await self.drop_adapter(*key)
        for node in self.nodes.values():
            await self.network.stop(node.address)
        await self.network.close()


def _session_dead(adapter: Adapter) -> bool:
    inner = adapter.inner if isinstance(adapter, BridgedAdapter) else adapter
    return isinstance(inner, ANPAdapter) and inner.secure and inner.detect_failure() == "dead"


async def build_network(plan: Mapping[str, Any], **options: Any) -> AgentNetwork:
    """Start one server per node and one initialized adapter per plan link."""
    return await AgentNetwork(plan, **options).start()
