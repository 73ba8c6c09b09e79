"""Safety probes against one protocol: a coordinator and two responders.

Findings are reported, never raised. The transport-security column is not
modeled (there is no PKI in the harness) and is reported as such.
"""

from __future__ import annotations

import asyncio
import json
import random
from dataclasses import dataclass, field
from typing import Any

from ..clock import loop_clock, run_virtual
from ..envelope import Envelope, ProtocolError, dumps, new_envelope
from ..pal import TIMESTAMP_HEADER
from ..protocols.anp import ANPAdapter, forge_session_header
from ..transport import ConfigError, HttpRequest, InProcessNetwork
from ..wire import PAYLOAD, TapContext, WireTap
from . import eventlog as ev
from .config import ScenarioConfig
from .eventlog import EventLog
from .network import AgentNetwork, plan_for

NOT_MODELED = "not-modeled"
WATERMARK_PREFIX = "HIDDEN_MARKER:S2_E2E_WATERMARK_TEST"
SKEW_OFFSETS = (30.0, 120.0, 300.0, 600.0)
METADATA_PATHS = ("/health", "/metrics", "/status")
# Fields a health endpoint may expose without leaking deployment metadata.
BENIGN_FIELDS = frozenset({"status"})
REPLAY_ROUNDS = 2
MATRIX_COLUMNS = ("TLS/Transport", "Session Hijack", "E2E Encryption", "Tunnel Sniffing", "Metadata Leakage")


@dataclass
class ProbeReport:
    protocol: str
    session_hijack: bool
    e2e_encryption: bool
    tunnel_sniffing: bool
    metadata_leakage: bool
    clock_skew: bool
    tls_transport: str = NOT_MODELED
    findings: dict[str, Any] = field(default_factory=dict)

    def matrix_row(self) -> dict[str, str]:
        def mark(ok: bool) -> str:
            return "✓" if ok else "✗"

        return {
            "TLS/Transport": self.tls_transport,
            "Session Hijack": mark(self.session_hijack),
            "E2E Encryption": mark(self.e2e_encryption),
            "Tunnel Sniffing": mark(self.tunnel_sniffing),
            "Metadata Leakage": mark(self.metadata_leakage),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "protocol": self.protocol,
            "tls_transport": self.tls_transport,
            "session_hijack": self.session_hijack,
            "e2e_encryption": self.e2e_encryption,
            "tunnel_sniffing": self.tunnel_sniffing,
            "metadata_leakage": self.metadata_leakage,
            "clock_skew": self.clock_skew,
            "matrix_row": self.matrix_row(),
            "findings": self.findings,
        }


class _Probe:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.protocol = cfg.protocol
        self.clock = loop_clock()
        self.log = EventLog(self.clock)
        self.rng = random.Random(f"safety:{cfg.seed}")
        self.token = f"session_{self.rng.getrandbits(64):016x}"
        ids = cfg.topology.node_ids()
        self.coordinator, self.responders = ids[0], ids[1:]
        self.net = AgentNetwork(
            plan_for(cfg.topology, lambda _: self.protocol),
            network=InProcessNetwork(WireTap(self.clock), latency=cfg.link_latency),
            clock=self.clock,
            seed=cfg.seed,
            auth_tokens={self.token},
            credentials=self.token,
            max_skew=cfg.timing.skew_window,
            timeout=cfg.timing.message_timeout,
        )

    def server(self, node: str):
        return self.net.nodes[node].server

    def envelope(self, dst: str, content: dict[str, Any], offset: float = 0.0) -> Envelope:
        clock = (lambda: self.clock() + offset) if offset else self.clock
        return new_envelope(self.coordinator, dst, content, intent="consult", ids=self.net.ids, clock=clock)

    async def _post(self, dst: str, path: str, body: bytes, token: str, stamp: float) -> int:
        headers = {"content-type": "application/json", "authorization": f"Bearer {token}", TIMESTAMP_HEADER: repr(stamp)}
        req = HttpRequest("POST", path, headers, body)
        resp = await self.net.network.request(
            self.net.nodes[dst].address, req, _ctx(self.coordinator, dst, self.protocol)
        )
        return resp.status

    # -- individual probes

    async def watermark(self) -> dict[str, Any]:
        marker = f"{WATERMARK_PREFIX}_{self.rng.getrandbits(32):08x}"
        for dst in self.responders:
            adapter = await self.net.adapter(self.coordinator, dst)
            await adapter.send(self.envelope(dst, {"case": "synthetic-record", "note": marker}))
        hits = self.net.tap.contains(marker)
        self.log.record(ev.PROBE, "watermark", self.coordinator, bytes=len(hits))
        return {"marker": marker, "frames_scanned": len(self.net.tap.frames), "frames_with_marker": len(hits)}

    def _captured_request(self, dst: str) -> bytes:
        for frame in self.net.tap.frames:
            if frame.direction == "out" and frame.dst == dst and frame.kind == PAYLOAD:
                return frame.data
        raise ConfigError(f"no captured request towards {dst}")

    async def replay(self) -> dict[str, Any]:
        dst = self.responders[0]
        server = self.server(dst)
        captured = self._captured_request(dst)
        before = server.effects
        outcomes = []
        adapter = await self.net.adapter(self.coordinator, dst)
        for _ in range(REPLAY_ROUNDS):
            if isinstance(adapter, ANPAdapter):
                rejected = server.rejected_frames
                await adapter.conn.send(captured)
                await _settle()
                outcomes.append("rejected" if server.rejected_frames > rejected else "accepted")
            else:
                status = await self._post(dst, adapter.message_path, captured, self.token, self.clock())
                outcomes.append(f"http {status}")
        blocked = server.effects == before
        self.log.record(ev.PROBE, "replay", dst, attempt=REPLAY_ROUNDS)
        return {"rounds": REPLAY_ROUNDS, "outcomes": outcomes, "new_effects": server.effects - before, "blocked": blocked}

    async def hijack(self) -> dict[str, Any]:
        dst = self.responders[1 % len(self.responders)]
        server = self.server(dst)
        before = server.effects
        tokens = [f"admin_session_{self.rng.getrandbits(32):08x}", f"expired_session_{self.rng.getrandbits(32):08x}"]
        adapter = await self.net.adapter(self.coordinator, dst)
        outcomes: dict[str, str] = {}
        for token in tokens:
            if isinstance(adapter, ANPAdapter):
                rejected = server.rejected_frames
                frame = self._captured_request(dst)
                await adapter.conn.send(forge_session_header(frame, token))
                await _settle()
                outcomes[f"session:{token}"] = "rejected" if server.rejected_frames > rejected else "accepted"
                body = dumps({"type": "anp_message"})
                status = await self._post(dst, "/anp/message", body, token, self.clock())
            else:
                e = self.envelope(dst, {"case": "escalate", "role": "admin"})
                body = dumps(adapter.codec.encode(e))
                status = await self._post(dst, adapter.message_path, body, token, e.ts)
            outcomes[f"bearer:{token}"] = f"http {status}"
        denied = server.effects == before and all(not v.startswith(("http 2", "accepted")) for v in outcomes.values())
        self.log.record(ev.PROBE, "hijack", dst, attempt=len(tokens))
        return {"tokens": tokens, "outcomes": outcomes, "denied": denied}

    async def metadata(self) -> dict[str, Any]:
        exposed: dict[str, list[str]] = {}
        for dst in self.responders:
            for path in METADATA_PATHS:
                req = HttpRequest("GET", path, {})
                resp = await self.net.network.request(
                    self.net.nodes[dst].address, req, _ctx(self.coordinator, dst, self.protocol, "control")
                )
                if not resp.ok:
                    continue
                try:
                    doc = json.loads(resp.body)
                except ValueError:
                    doc = {}
                fields = sorted(doc) if isinstance(doc, dict) else []
                exposed[f"{dst}{path}"] = fields
        leaked = {k: [f for f in v if f not in BENIGN_FIELDS] for k, v in exposed.items()}
        leaked = {k: v for k, v in leaked.items() if v}
        self.log.record(ev.PROBE, "metadata", self.coordinator, bytes=sum(len(v) for v in exposed.values()))
        return {"exposed_fields": exposed, "field_count": sum(len(v) for v in exposed.values()), "leaked": leaked}

    async def clock_skew(self) -> dict[str, Any]:
        dst = self.responders[0]
        window = self.cfg.timing.skew_window
        results = {}
        for base in SKEW_OFFSETS:
            for sign in (1, -1):
                offset = sign * self.cfg.timing.scaled(base)
                adapter = await self.net.adapter(self.coordinator, dst)
                try:
                    await adapter.send(self.envelope(dst, {"case": "skew"}, offset))
                    accepted = True
                except ProtocolError:
                    accepted = False
                label = f"{'+' if sign > 0 else '-'}{base:g}s"
                results[label] = {"accepted": accepted, "expected": abs(offset) <= window}
        self.log.record(ev.PROBE, "clock_skew", dst, attempt=len(results))
        ok = all(r["accepted"] == r["expected"] for r in results.values())
        return {"window": window, "offsets": results, "ok": ok}

    async def run(self) -> tuple[ProbeReport, EventLog]:
        await self.net.start()
        try:
            water = await self.watermark()
            replay = await self.replay()
            hijack = await self.hijack()
            meta = await self.metadata()
            skew = await self.clock_skew()
        finally:
            await self.net.close()
        sealed = water["frames_with_marker"] == 0
        report = ProbeReport(
            protocol=self.protocol,
            session_hijack=replay["blocked"] and hijack["denied"],
            e2e_encryption=sealed,
            tunnel_sniffing=sealed,
            metadata_leakage=not meta["leaked"],
            clock_skew=skew["ok"],
            findings={"watermark": water, "replay": replay, "hijack": hijack, "metadata": meta, "clock_skew": skew},
        )
        return report, self.log


def _ctx(src: str, dst: str, protocol: str, kind: str = PAYLOAD) -> TapContext:
    return TapContext(src, dst, protocol, 0, kind)


async def _settle(rounds: int = 5) -> None:
    """Let the in-loop peer process what was just sent (no virtual time passes)."""
    for _ in range(rounds):
        await asyncio.sleep(0)


async def safety_probes(cfg: ScenarioConfig) -> tuple[ProbeReport, EventLog]:
    if cfg.scenario != "safety":
        raise ConfigError(f"expected a safety config, got {cfg.scenario}")
    if cfg.protocol not in ("a2a", "acp", "agora", "anp"):
        raise ConfigError("safety probes need one fixed protocol")
    return await _Probe(cfg).run()


def run_safety_probes(cfg: ScenarioConfig) -> tuple[ProbeReport, EventLog]:
    return run_virtual(safety_probes(cfg))
