"""Identity documents, key agreement and sealed frames for the secure session.

Frame layout on the socket::

    u16 header_len | header JSON {session_id, seq, frame_type} | AES-GCM ciphertext

The header is authenticated as associated data. Each direction has its own
key derived from an X25519 exchange; the 96-bit nonce is a direction label
followed by the big-endian sequence number, so nonces never repeat under a key.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Any

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..envelope import Envelope, ErrorCode, ProtocolError, dumps

DID_METHOD = "did:local:"
DATA, HEARTBEAT, CLOSE = "data", "heartbeat", "close"
FRAME_TYPES = (DATA, HEARTBEAT, CLOSE)
MAX_SEQ = 2**64 - 1
_KDF_INFO = b"protomesh-anp/v1"
_RAW = serialization.Encoding.Raw, serialization.PublicFormat.Raw


def did_for(public_key: bytes) -> str:
    return DID_METHOD + hashlib.sha256(public_key).hexdigest()


@dataclass(frozen=True)
class IdentityDoc:
    did: str
    public_key: bytes
    created_at: float = 0.0

    @property
    def fingerprint_ok(self) -> bool:
        return self.did == did_for(self.public_key)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.did, "public_key": self.public_key.hex(), "created_at": self.created_at}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "IdentityDoc":
        return cls(doc["id"], bytes.fromhex(doc["public_key"]), doc.get("created_at", 0.0))


class Identity:
    """An identity document plus its signing key (never serialized)."""

    def __init__(self, private_key: Ed25519PrivateKey, created_at: float = 0.0):
        self._key = private_key
        public = private_key.public_key().public_bytes(*_RAW)
        self.doc = IdentityDoc(did_for(public), public, created_at)

    @property
    def did(self) -> str:
        return self.doc.did

    def sign(self, data: bytes) -> bytes:
        return self._key.sign(data)

    def __repr__(self) -> str:
        return f"Identity({self.did})"

    def __reduce__(self):
        raise TypeError("identities are not serializable")


def create_identity(seed: int, created_at: float = 0.0) -> Identity:
    """Deterministic identity: the signing key is derived from ``seed``."""
    raw = hashlib.sha256(b"protomesh-identity:" + str(seed).encode()).digest()
    return Identity(Ed25519PrivateKey.from_private_bytes(raw), created_at)


def verify_signature(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


class DidResolver:
    """Local cache of identity documents; not a general-purpose resolver."""

    def __init__(self) -> None:
        self._docs: dict[str, IdentityDoc] = {}

    def register(self, doc: IdentityDoc) -> None:
        if not doc.fingerprint_ok:
            raise ProtocolError.of(ErrorCode.E_CONN, f"identity document for {doc.did} fails fingerprint check")
        self._docs[doc.did] = doc

    def resolve(self, did: str) -> IdentityDoc:
        doc = self._docs.get(did)
        if doc is None:
            raise ProtocolError.of(ErrorCode.E_CONN, f"cannot resolve {did}")
        return doc


class EphemeralKey:
    def __init__(self) -> None:
        self._key = X25519PrivateKey.generate()
        self.public = self._key.public_key().public_bytes(*_RAW)

    def exchange(self, peer_public: bytes) -> bytes:
        return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))


def derive_keys(shared: bytes, salt: bytes, session_id: str) -> tuple[bytes, bytes]:
    """Client-to-server and server-to-client keys."""
    okm = HKDF(hashes.SHA256(), 64, salt, _KDF_INFO + session_id.encode()).derive(shared)
    return okm[:32], okm[32:]


def transcript(client_hello: dict[str, Any], server_fields: dict[str, Any]) -> bytes:
    canonical = json.dumps([client_hello, server_fields], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).digest()


def encode_frame(header: dict[str, Any], ciphertext: bytes) -> bytes:
    raw = dumps(header)
    return struct.pack(">H", len(raw)) + raw + ciphertext


def parse_frame(data: bytes) -> tuple[dict[str, Any], bytes, bytes]:
    """Return ``(header, header_bytes, ciphertext)``."""
    try:
        (n,) = struct.unpack(">H", data[:2])
        raw = data[2 : 2 + n]
        header = json.loads(raw)
        if header["frame_type"] not in FRAME_TYPES or not isinstance(header["seq"], int):
            raise ValueError("bad header")
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ProtocolError.of(ErrorCode.E_PROTOCOL, f"malformed frame: {exc}") from exc
    return header, raw, data[2 + n :]


_DIRECTION = {"c2s": b"c2s\x00", "s2c": b"s2c\x00"}


class SecureSession:
    """One end of an established session.

    ``send_seq`` is the last sequence number sealed; ``recv_seq`` the last one
    accepted. Both only increase.
    """

    def __init__(self, session_id: str, local_did: str, remote_did: str, c2s: bytes, s2c: bytes, role: str):
        if role not in ("client", "server"):
            raise ValueError(role)
        self.session_id = session_id
        self.local_did = local_did
        self.remote_did = remote_did
        out_dir, in_dir = ("c2s", "s2c") if role == "client" else ("s2c", "c2s")
        keys = {"c2s": c2s, "s2c": s2c}
        self._send = AESGCM(keys[out_dir])
        self._recv = AESGCM(keys[in_dir])
        self._send_label = _DIRECTION[out_dir]
        self._recv_label = _DIRECTION[in_dir]
        self.send_seq = 0
        self.recv_seq = 0

    def __repr__(self) -> str:
        return f"SecureSession({self.session_id}, {self.local_did} -> {self.remote_did})"

    def __reduce__(self):
        raise TypeError("session keys are not serializable")

    def seal_bytes(self, plaintext: bytes, frame_type: str = DATA) -> bytes:
        if self.send_seq >= MAX_SEQ:
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, "sequence space exhausted")
        self.send_seq += 1
        header = {"session_id": self.session_id, "seq": self.send_seq, "frame_type": frame_type}
        raw = dumps(header)
        nonce = self._send_label + struct.pack(">Q", self.send_seq)
        return struct.pack(">H", len(raw)) + raw + self._send.encrypt(nonce, plaintext, raw)

    def open_bytes(self, data: bytes) -> tuple[str, bytes]:
        """Authenticate and decrypt; returns ``(frame_type, plaintext)``."""
        header, raw, ciphertext = parse_frame(data)
        if header.get("session_id") != self.session_id:
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, "frame for another session")
        seq = header["seq"]
        if seq <= self.recv_seq:
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, f"replayed or stale seq {seq}")
        nonce = self._recv_label + struct.pack(">Q", seq)
        try:
            plaintext = self._recv.decrypt(nonce, ciphertext, raw)
        except InvalidTag:
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, "frame authentication failed") from None
        self.recv_seq = seq
        return header["frame_type"], plaintext

    def seal(self, e: Envelope) -> bytes:
        return self.seal_bytes(e.to_json(), DATA)

    def open(self, data: bytes) -> Envelope:
        frame_type, plaintext = self.open_bytes(data)
        if frame_type != DATA:
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, f"expected data frame, got {frame_type}")
        return Envelope.from_dict(json.loads(plaintext))
