"""Server-sent-event framing shared by the streaming endpoints."""

from __future__ import annotations

from typing import AsyncIterator

DONE_EVENT = "done"
FRAGMENT_EVENT = "fragment"
CONTENT_TYPE = "text/event-stream"


def format_event(event: str, data: bytes) -> bytes:
    lines = [f"event: {event}".encode()]
    for line in data.split(b"\n"):
        lines.append(b"data: " + line)
    return b"\n".join(lines) + b"\n\n"


async def parse_events(chunks: AsyncIterator[bytes]) -> AsyncIterator[tuple[str, bytes]]:
    """Yield ``(event, data)`` pairs; tolerates arbitrary chunk boundaries."""
    buf = b""
    async for chunk in chunks:
        buf += chunk.replace(b"\r\n", b"\n")
        while b"\n\n" in buf:
            raw, buf = buf.split(b"\n\n", 1)
            parsed = _parse_block(raw)
            if parsed is not None:
                yield parsed
    if buf.strip():
        parsed = _parse_block(buf)
        if parsed is not None:
            yield parsed


def _parse_block(raw: bytes) -> tuple[str, bytes] | None:
    event = "message"
    data: list[bytes] = []
    for line in raw.split(b"\n"):
        if not line or line.startswith(b":"):
            continue
        name, _, value = line.partition(b":")
        if value.startswith(b" "):
            value = value[1:]
        if name == b"event":
            event = value.decode()
        elif name == b"data":
            data.append(value)
    if not data and event == "message":
        return None
    return event, b"\n".join(data)
