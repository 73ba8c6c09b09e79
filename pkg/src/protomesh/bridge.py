"""Stateless cross-protocol bridges for heterogeneous links.

A bridge decodes a source-protocol document into an :class:`Envelope` and
re-encodes it for the destination protocol. Only field mapping happens; the
business content is passed through untouched. Leaving an ANP domain for a
plaintext protocol is refused unless the link is explicitly marked insecure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, AsyncIterator, Mapping

from .envelope import Envelope, ErrorCode, ProtocolError
from .pal import Adapter, CodecRegistry, Fragment
from .protocols import default_codecs

STREAMING_PROTOCOLS = frozenset({"a2a", "acp", "anp"})
SECURE_PROTOCOLS = frozenset({"anp"})


@dataclass(frozen=True)
class BridgeSpec:
    src_module: str
    dst_module: str
    decode_from: str
    encode_to: str
    stateless: bool = True
    allow_insecure: bool = False

    def __post_init__(self) -> None:
        if not self.stateless:
            raise ValueError("bridges are stateless")
        object.__setattr__(self, "decode_from", self.decode_from.lower())
        object.__setattr__(self, "encode_to", self.encode_to.lower())

    @property
    def lineage_tag(self) -> str:
        return f"bridge:{self.decode_from}>{self.encode_to}"

    @property
    def downgrades(self) -> bool:
        return self.decode_from in SECURE_PROTOCOLS and self.encode_to not in SECURE_PROTOCOLS

    def reverse(self) -> "BridgeSpec":
        return BridgeSpec(self.dst_module, self.src_module, self.encode_to, self.decode_from, True, self.allow_insecure)

    def to_plan_entry(self) -> dict[str, Any]:
        return {
            "src": self.src_module,
            "dst": self.dst_module,
            "encode": f"encode_to_{self.encode_to}",
            "decode": f"decode_from_{self.decode_from}",
            "stateless": True,
        }

    @classmethod
    def from_plan_entry(cls, entry: Mapping[str, Any], allow_insecure: bool = False) -> "BridgeSpec":
        encode, decode = entry["encode"], entry["decode"]
        if not encode.startswith("encode_to_") or not decode.startswith("decode_from_"):
            raise ValueError(f"malformed bridge entry {entry!r}")
        return cls(
            entry["src"],
            entry["dst"],
            decode[len("decode_from_"):],
            encode[len("encode_to_"):],
            bool(entry.get("stateless", True)),
            allow_insecure,
        )


_DEFAULT_CODECS: CodecRegistry | None = None


def _codecs(codecs: CodecRegistry | None) -> CodecRegistry:
    global _DEFAULT_CODECS
    if codecs is not None:
        return codecs
    if _DEFAULT_CODECS is None:
        _DEFAULT_CODECS = default_codecs()
    return _DEFAULT_CODECS


def bridge_envelope(spec: BridgeSpec, e: Envelope) -> Envelope:
    """Envelope-level checks and lineage shared by both bridge entry points."""
    if spec.downgrades and not spec.allow_insecure:
        raise ProtocolError.of(
            ErrorCode.E_UNSUPPORTED, f"refusing to bridge {spec.decode_from} into plaintext {spec.encode_to}"
        )
    if e.context.stream and spec.encode_to not in STREAMING_PROTOCOLS:
        raise ProtocolError.of(ErrorCode.E_UNSUPPORTED, f"{spec.encode_to} path does not stream")
    if spec.decode_from == spec.encode_to:
        return e
    return e.with_context(tags=e.context.tags + (spec.lineage_tag,))


def bridge_translate(
    spec: BridgeSpec,
    wire_in: Mapping[str, Any],
    codecs: CodecRegistry | None = None,
    headers: Mapping[str, str] | None = None,
    *,
    response: bool = False,
) -> dict[str, Any]:
    """``encode_to(decode_from(wire_in))`` with the security and capability checks."""
    codecs = _codecs(codecs)
    source, target = codecs.get(spec.decode_from), codecs.get(spec.encode_to)
    try:
        e = source.decode_reply(dict(wire_in)) if response else source.decode(dict(wire_in), dict(headers or {}))
    except ProtocolError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ProtocolError.of(ErrorCode.E_DECODE, f"malformed {spec.decode_from} document: {exc}") from exc
    e = bridge_envelope(spec, e)
    try:
        return target.encode_reply(e) if response else target.encode(e)
    except (TypeError, ValueError) as exc:
        raise ProtocolError.of(ErrorCode.E_ENCODE, str(exc)) from exc


def install_bridges(plan: Mapping[str, Any], *, allow_insecure: bool = False) -> list[BridgeSpec]:
    """One bridge per heterogeneous link of a network plan; none for homogeneous links."""
    bridges: dict[tuple[str, str], BridgeSpec] = {}
    for link in plan.get("links", ()):
        src_p, dst_p = (p.lower() for p in link["protocol"])
        if src_p == dst_p:
            continue
        key = (link["src"], link["dst"])
        bridges.setdefault(key, BridgeSpec(link["src"], link["dst"], src_p, dst_p, True, allow_insecure))
    return list(bridges.values())


class BridgedAdapter(Adapter):
    """Sends a source-protocol envelope over a destination-protocol adapter.

    The request crosses ``spec`` on its way out and the reply crosses the
    reverse bridge on its way back, so both directions see the same checks.
    """

    def __init__(self, inner: Adapter, spec: BridgeSpec, codecs: CodecRegistry | None = None):
        if inner.protocol_name != spec.encode_to:
            raise ValueError(f"bridge emits {spec.encode_to} but adapter speaks {inner.protocol_name}")
        # Deliberately skips Adapter.__init__: all transport state lives in ``inner``.
        self.inner = inner
        self.spec = spec
        self.codecs = _codecs(codecs)
        self.protocol_name = spec.decode_from
        self.descriptor = inner.descriptor
        self.metrics = inner.metrics
        self.clock = inner.clock
        self.closed = False
        self.supports_streaming = inner.supports_streaming

    def _forward(self, e: Envelope) -> Envelope:
        doc = self.codecs.get(self.spec.decode_from).encode(e)
        return self.codecs.get(self.spec.encode_to).decode(bridge_translate(self.spec, doc, self.codecs))

    def _backward(self, reply: Envelope) -> Envelope:
        back = self.spec.reverse()
        doc = self.codecs.get(back.decode_from).encode_reply(reply)
        return self.codecs.get(back.encode_to).decode_reply(bridge_translate(back, doc, self.codecs, response=True))

    async def initialize(self) -> None:
        await self.inner.initialize()

    async def health_check(self) -> bool:
        return await self.inner.health_check()

    async def cleanup(self) -> None:
        await self.inner.cleanup()
        self.closed = True

    async def send(self, e: Envelope) -> Envelope:
        return self._backward(await self.inner.send(self._forward(e)))

    async def send_streaming(self, e: Envelope) -> AsyncIterator[Fragment]:
        async for fragment in self.inner.send_streaming(self._forward(e.with_context(stream=True))):
            if fragment.envelope is None:
                yield fragment
            else:
                yield Fragment(fragment.index, self._backward(fragment.envelope), fragment.final)
