"""Protocol codecs, servers and client adapters."""

from ..pal import CodecRegistry
from .a2a import A2A_CODEC, A2AAdapter, A2AServer
from .acp import ACP_CODEC, ACPAdapter, ACPServer
from .agora import AGORA_CODEC, AgoraAdapter, AgoraServer
from .anp import ANP_CODEC, ANPAdapter, ANPServer

SERVERS = {"a2a": A2AServer, "acp": ACPServer, "agora": AgoraServer, "anp": ANPServer}
ADAPTERS = {"a2a": A2AAdapter, "acp": ACPAdapter, "agora": AgoraAdapter, "anp": ANPAdapter}


def default_codecs() -> CodecRegistry:
    """Frozen registry holding the four built-in codecs."""
    registry = CodecRegistry()
    for entry in (A2A_CODEC, ACP_CODEC, ANP_CODEC, AGORA_CODEC):
        registry.register(entry)
    return registry.freeze()


__all__ = [
    "ADAPTERS",
    "SERVERS",
    "A2AAdapter",
    "A2AServer",
    "ACPAdapter",
    "ACPServer",
    "AgoraAdapter",
    "AgoraServer",
    "ANPAdapter",
    "ANPServer",
    "default_codecs",
]
