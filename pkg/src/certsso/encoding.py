"""Canonical TLV encoding and text envelopes.

Every structured byte string in the package (certificates, message payloads,
sealed plaintexts, key blobs) uses the same field scheme: 2-byte big-endian
tag, 4-byte big-endian length, raw value bytes, fields in a fixed declaration
order. Decoding is strict: wrong tag order, truncation, or trailing bytes are
malformed. That makes every encoding a bijection, which the signatures rely
on.
"""

from __future__ import annotations

import base64
import binascii
import struct

from .errors import EncodingError, MalformedData

MAX_VALUE_LEN = 0xFFFFFFFF

_HEADER = struct.Struct(">HI")


def encode_fields(fields: list[tuple[int, bytes]]) -> bytes:
    parts = []
    for tag, value in fields:
        if not 0 <= tag <= 0xFFFF:
            raise EncodingError(f"tag out of range: {tag}")
        if len(value) > MAX_VALUE_LEN:
            raise EncodingError(f"field 0x{tag:04x} too long: {len(value)} bytes")
        parts.append(_HEADER.pack(tag, len(value)))
        parts.append(value)
    return b"".join(parts)


def decode_fields(data: bytes, expected_tags: tuple[int, ...]) -> list[bytes]:
    """Parse exactly the expected tags, in order, consuming all input."""
    values = []
    offset = 0
    for tag in expected_tags:
        if offset + _HEADER.size > len(data):
            raise MalformedData(f"truncated before field 0x{tag:04x}")
        got, length = _HEADER.unpack_from(data, offset)
        if got != tag:
            raise MalformedData(f"expected tag 0x{tag:04x}, found 0x{got:04x}")
        offset += _HEADER.size
        if offset + length > len(data):
            raise MalformedData(f"field 0x{tag:04x} overruns buffer")
        values.append(data[offset : offset + length])
        offset += length
    if offset != len(data):
        raise MalformedData(f"{len(data) - offset} trailing bytes after last field")
    return values


def encode_u64(value: int) -> bytes:
    if not 0 <= value < 1 << 64:
        raise EncodingError(f"u64 out of range: {value}")
    return value.to_bytes(8, "big")


def decode_u64(data: bytes) -> int:
    if len(data) != 8:
        raise MalformedData(f"u64 field has {len(data)} bytes")
    return int.from_bytes(data, "big")


def pack_entries(entries: list[bytes]) -> bytes:
    """Concatenate u16-length-prefixed entries (used for role lists)."""
    parts = []
    for entry in entries:
        if len(entry) > 0xFFFF:
            raise EncodingError("entry too long")
        parts.append(len(entry).to_bytes(2, "big"))
        parts.append(entry)
    return b"".join(parts)


def unpack_entries(data: bytes) -> list[bytes]:
    entries = []
    offset = 0
    while offset < len(data):
        if offset + 2 > len(data):
            raise MalformedData("truncated entry length")
        length = int.from_bytes(data[offset : offset + 2], "big")
        offset += 2
        if offset + length > len(data):
            raise MalformedData("entry overruns buffer")
        entries.append(data[offset : offset + length])
        offset += length
    return entries


# ---------- base-64 text envelopes (credential files on disk)


def to_envelope(label: str, payload: bytes) -> str:
    body = base64.b64encode(payload).decode("ascii")
    lines = [body[i : i + 64] for i in range(0, len(body), 64)] or [""]
    return (
        f"-----BEGIN {label}-----\n"
        + "\n".join(lines)
        + f"\n-----END {label}-----\n"
    )


def from_envelope(label: str, text: str) -> bytes:
    begin = f"-----BEGIN {label}-----"
    end = f"-----END {label}-----"
    lines = text.splitlines()
    try:
        start = lines.index(begin)
        stop = lines.index(end, start + 1)
    except ValueError:
        raise MalformedData(f"no {label} envelope found") from None
    body = "".join(line.strip() for line in lines[start + 1 : stop])
    try:
        return base64.b64decode(body, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedData(f"bad base64 in {label} envelope: {exc}") from None
