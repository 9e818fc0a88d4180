"""Framing and payload codecs for the eight protocol messages.

Frame layout: 2-byte magic 0x53 0x4F, 1 version byte, 1 message-type byte,
4-byte big-endian payload length, payload. Payloads are TLV records. The
version byte identifies the crypto suite (0x01 = SHA-256 + AES-256-GCM,
0x02 = SHA-256 + 3DES-EDE-HMAC) so incompatible builds fail on the first
frame. Frames are capped at 1 MiB; every legitimate message is well under
16 KiB.

Parsing is strict: any structural defect maps to a distinct typed error, and
a buffer holding only a frame prefix raises NeedMoreData (the streaming
contract), never an error.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import (
    DIGEST_BYTES,
    LEGACY_3DES,
    MODERN_AEAD,
    NONCE_BYTES,
    SealedBox,
)
from .encoding import decode_fields, encode_fields
from .errors import (
    BadMagic,
    EncodingError,
    FrameTooLarge,
    LengthMismatch,
    MalformedData,
    NeedMoreData,
    Truncated,
    UnknownMessageType,
    UnknownVersion,
)

MAGIC = b"\x53\x4f"
HEADER_BYTES = 8
MAX_PAYLOAD = 1 << 20

WIRE_VERSIONS = {MODERN_AEAD: 0x01, LEGACY_3DES: 0x02}

TYPE_CONN_REQUEST = 0x11
TYPE_CONN_ACCEPT = 0x12
TYPE_ENROLL = 0x13
TYPE_CREDENTIALS = 0x14
TYPE_ACCESS_REQUEST = 0x21
TYPE_CHALLENGE = 0x22
TYPE_AUTH_RESPONSE = 0x23
TYPE_SESSION_GRANT = 0x24
TYPE_APP_DATA = 0x31


@dataclass(frozen=True)
class ConnRequest:  # M1
    username: str


@dataclass(frozen=True)
class ConnAccept:  # M2
    nonce_digest: bytes


@dataclass(frozen=True)
class Enroll:  # M3
    sealed: SealedBox


@dataclass(frozen=True)
class Credentials:  # M4
    cert_bytes: bytes
    enc_sk: bytes
    nonce: bytes
    sig: bytes


@dataclass(frozen=True)
class AccessRequest:  # R1
    client_hint: str


@dataclass(frozen=True)
class Challenge:  # R2
    nonce: bytes
    server_cert_bytes: bytes


@dataclass(frozen=True)
class AuthResponse:  # R3
    cert_bytes: bytes
    sig: bytes


@dataclass(frozen=True)
class SessionGrant:  # R4
    sealed: SealedBox
    sig: bytes


@dataclass(frozen=True)
class AppData:
    ciphertext: bytes


ProtocolMessage = (
    ConnRequest
    | ConnAccept
    | Enroll
    | Credentials
    | AccessRequest
    | Challenge
    | AuthResponse
    | SessionGrant
    | AppData
)

MSG_TYPE_OF = {
    ConnRequest: TYPE_CONN_REQUEST,
    ConnAccept: TYPE_CONN_ACCEPT,
    Enroll: TYPE_ENROLL,
    Credentials: TYPE_CREDENTIALS,
    AccessRequest: TYPE_ACCESS_REQUEST,
    Challenge: TYPE_CHALLENGE,
    AuthResponse: TYPE_AUTH_RESPONSE,
    SessionGrant: TYPE_SESSION_GRANT,
    AppData: TYPE_APP_DATA,
}

MSG_NAMES = {
    TYPE_CONN_REQUEST: "m1",
    TYPE_CONN_ACCEPT: "m2",
    TYPE_ENROLL: "m3",
    TYPE_CREDENTIALS: "m4",
    TYPE_ACCESS_REQUEST: "r1",
    TYPE_CHALLENGE: "r2",
    TYPE_AUTH_RESPONSE: "r3",
    TYPE_SESSION_GRANT: "r4",
    TYPE_APP_DATA: "appdata",
}


def _username_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    if not raw or len(raw) > 255:
        raise EncodingError("username must be 1..255 encoded bytes")
    return raw


def _encode_payload(msg: ProtocolMessage) -> bytes:
    if isinstance(msg, ConnRequest):
        return encode_fields([(0x01, _username_bytes(msg.username))])
    if isinstance(msg, ConnAccept):
        return encode_fields([(0x01, msg.nonce_digest)])
    if isinstance(msg, Enroll):
        return encode_fields([(0x01, msg.sealed.to_bytes())])
    if isinstance(msg, Credentials):
        return encode_fields(
            [
                (0x01, msg.cert_bytes),
                (0x02, msg.enc_sk),
                (0x03, msg.nonce),
                (0x04, msg.sig),
            ]
        )
    if isinstance(msg, AccessRequest):
        return encode_fields([(0x01, _username_bytes(msg.client_hint))])
    if isinstance(msg, Challenge):
        return encode_fields([(0x01, msg.nonce), (0x02, msg.server_cert_bytes)])
    if isinstance(msg, AuthResponse):
        return encode_fields([(0x01, msg.cert_bytes), (0x02, msg.sig)])
    if isinstance(msg, SessionGrant):
        return encode_fields([(0x01, msg.sealed.to_bytes()), (0x02, msg.sig)])
    if isinstance(msg, AppData):
        return encode_fields([(0x01, msg.ciphertext)])
    raise EncodingError(f"not a protocol message: {type(msg).__name__}")


def _check_digest(raw: bytes) -> bytes:
    if len(raw) != DIGEST_BYTES:
        raise MalformedData(f"digest field has {len(raw)} bytes")
    return raw


def _check_nonce(raw: bytes) -> bytes:
    if len(raw) != NONCE_BYTES:
        raise MalformedData(f"nonce field has {len(raw)} bytes")
    return raw


def _decode_name(raw: bytes) -> str:
    try:
        name = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedData("name field is not valid UTF-8") from None
    if not name or len(raw) > 255:
        raise MalformedData("name field must be 1..255 bytes")
    return name


def _decode_payload(msg_type: int, payload: bytes) -> ProtocolMessage:
    if msg_type == TYPE_CONN_REQUEST:
        (raw,) = decode_fields(payload, (0x01,))
        return ConnRequest(_decode_name(raw))
    if msg_type == TYPE_CONN_ACCEPT:
        (raw,) = decode_fields(payload, (0x01,))
        return ConnAccept(_check_digest(raw))
    if msg_type == TYPE_ENROLL:
        (raw,) = decode_fields(payload, (0x01,))
        return Enroll(SealedBox.from_bytes(raw))
    if msg_type == TYPE_CREDENTIALS:
        cert, enc_sk, nonce, sig = decode_fields(payload, (0x01, 0x02, 0x03, 0x04))
        return Credentials(cert, enc_sk, _check_nonce(nonce), sig)
    if msg_type == TYPE_ACCESS_REQUEST:
        (raw,) = decode_fields(payload, (0x01,))
        return AccessRequest(_decode_name(raw))
    if msg_type == TYPE_CHALLENGE:
        nonce, cert = decode_fields(payload, (0x01, 0x02))
        return Challenge(_check_nonce(nonce), cert)
    if msg_type == TYPE_AUTH_RESPONSE:
        cert, sig = decode_fields(payload, (0x01, 0x02))
        return AuthResponse(cert, sig)
    if msg_type == TYPE_SESSION_GRANT:
        sealed, sig = decode_fields(payload, (0x01, 0x02))
        return SessionGrant(SealedBox.from_bytes(sealed), sig)
    if msg_type == TYPE_APP_DATA:
        (ct,) = decode_fields(payload, (0x01,))
        return AppData(ct)
    raise UnknownMessageType(f"0x{msg_type:02x}")


def encode_msg(msg: ProtocolMessage, version: int = WIRE_VERSIONS[MODERN_AEAD]) -> bytes:
    payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise EncodingError(f"payload of {len(payload)} bytes exceeds frame cap")
    return (
        MAGIC
        + bytes([version, MSG_TYPE_OF[type(msg)]])
        + len(payload).to_bytes(4, "big")
        + payload
    )


def decode_msg(
    data: bytes, version: int = WIRE_VERSIONS[MODERN_AEAD]
) -> tuple[ProtocolMessage, int]:
    """Decode one frame from the front of `data`; returns (message, consumed).

    Raises NeedMoreData while `data` holds only a prefix of a frame.
    """
    if len(data) < HEADER_BYTES:
        raise NeedMoreData
    if data[:2] != MAGIC:
        raise BadMagic(f"bad magic {data[:2].hex()}")
    if data[2] != version:
        raise UnknownVersion(f"version 0x{data[2]:02x}, expected 0x{version:02x}")
    msg_type = data[3]
    if msg_type not in MSG_NAMES:
        raise UnknownMessageType(f"0x{msg_type:02x}")
    length = int.from_bytes(data[4:8], "big")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {length} exceeds cap")
    if len(data) < HEADER_BYTES + length:
        raise NeedMoreData
    payload = data[HEADER_BYTES : HEADER_BYTES + length]
    return _decode_payload(msg_type, payload), HEADER_BYTES + length


def decode_msg_exact(data: bytes, version: int = WIRE_VERSIONS[MODERN_AEAD]) -> ProtocolMessage:
    """Decode a buffer that must contain exactly one frame."""
    try:
        msg, consumed = decode_msg(data, version)
    except NeedMoreData:
        raise Truncated("buffer ends mid-frame") from None
    if consumed != len(data):
        raise LengthMismatch(f"{len(data) - consumed} bytes after frame")
    return msg


def read_frame(read, version: int = WIRE_VERSIONS[MODERN_AEAD]) -> ProtocolMessage | None:
    """Read one message from `read(n) -> bytes` (short reads fine, b"" = EOF).

    Returns None on clean EOF at a frame boundary; raises Truncated if the
    stream ends mid-frame.
    """
    buf = b""
    while len(buf) < HEADER_BYTES:
        chunk = read(HEADER_BYTES - len(buf))
        if not chunk:
            if buf:
                raise Truncated("stream closed inside frame header")
            return None
        buf += chunk
    # validate the header before trusting the length field
    if buf[:2] != MAGIC:
        raise BadMagic(f"bad magic {buf[:2].hex()}")
    if buf[2] != version:
        raise UnknownVersion(f"version 0x{buf[2]:02x}, expected 0x{version:02x}")
    if buf[3] not in MSG_NAMES:
        raise UnknownMessageType(f"0x{buf[3]:02x}")
    length = int.from_bytes(buf[4:8], "big")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {length} exceeds cap")
    while len(buf) < HEADER_BYTES + length:
        chunk = read(HEADER_BYTES + length - len(buf))
        if not chunk:
            raise Truncated("stream closed inside frame payload")
        buf += chunk
    return decode_msg_exact(buf, version)


class FrameStream:
    """Blocking framed message stream over a connected socket."""

    def __init__(self, sock, version: int = WIRE_VERSIONS[MODERN_AEAD]):
        self._sock = sock
        self.version = version

    def read_msg(self) -> ProtocolMessage | None:
        return read_frame(self._sock.recv, self.version)

    def write_msg(self, msg: ProtocolMessage) -> None:
        self._sock.sendall(encode_msg(msg, self.version))
