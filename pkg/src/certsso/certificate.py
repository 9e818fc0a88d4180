"""Identity certificates: canonical encoding, issuance, validation.

A certificate binds subject data, RBAC roles, a validity window and the
subject's public key under the issuer's signature. The encoding is the
package-wide TLV scheme (self-contained, bit-exact, no ASN.1); roles are a
first-class field stored sorted and duplicate-free so the byte encoding of a
certificate is unique.

Validation order is fixed — decode, known issuer, signature, time window —
so error reporting is deterministic.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field

from . import crypto
from .encoding import (
    decode_fields,
    decode_u64,
    encode_fields,
    encode_u64,
    from_envelope,
    pack_entries,
    to_envelope,
    unpack_entries,
)
from .errors import (
    BadSignature,
    EncodingError,
    Expired,
    MalformedCertificate,
    MalformedData,
    NotYetValid,
    UnknownIssuer,
)
from .rng import Rng

SERIAL_BYTES = 16
MAX_FIELD_BYTES = 255
DEFAULT_VALIDITY_SECONDS = 24 * 3600

ROLE_RE = re.compile(r"^[a-z0-9_-]{1,64}$")

CERT_LABEL = "SSO CERTIFICATE"
SECRET_KEY_LABEL = "SSO SECRET KEY"
ANCHOR_LABEL = "SSO TRUST ANCHOR"

_TAG_SERIAL = 0x01
_TAG_USERNAME = 0x02
_TAG_LOCATION = 0x03
_TAG_ORGANIZATION = 0x04
_TAG_EMAIL = 0x05
_TAG_ISSUER = 0x06
_TAG_NOT_BEFORE = 0x07
_TAG_NOT_AFTER = 0x08
_TAG_ROLES = 0x09
_TAG_PUBKEY = 0x0A
_TAG_SIGNATURE = 0x0B

_TBS_TAGS = (
    _TAG_SERIAL,
    _TAG_USERNAME,
    _TAG_LOCATION,
    _TAG_ORGANIZATION,
    _TAG_EMAIL,
    _TAG_ISSUER,
    _TAG_NOT_BEFORE,
    _TAG_NOT_AFTER,
    _TAG_ROLES,
    _TAG_PUBKEY,
)


@dataclass(frozen=True)
class SubjectInfo:
    username: str
    location: str = ""
    organization: str = ""
    email: str = ""

    def validate(self) -> None:
        if not self.username:
            raise ValueError("username must be non-empty")
        for name, value in (
            ("username", self.username),
            ("location", self.location),
            ("organization", self.organization),
            ("email", self.email),
        ):
            if len(value.encode("utf-8")) > MAX_FIELD_BYTES:
                raise ValueError(f"subject {name} exceeds {MAX_FIELD_BYTES} bytes")


def normalize_roles(roles) -> tuple[str, ...]:
    """Sorted, duplicate-free role tuple; rejects malformed role names."""
    out = sorted(set(roles))
    for role in out:
        if not isinstance(role, str) or not ROLE_RE.match(role):
            raise ValueError(f"bad role name: {role!r}")
    return tuple(out)


@dataclass(frozen=True)
class IdentityCertificate:
    serial: bytes
    subject: SubjectInfo
    issuer_id: str
    not_before: int
    not_after: int
    roles: tuple[str, ...]
    subject_public_key: crypto.PublicKey
    issuer_signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "roles", normalize_roles(self.roles))
        if len(self.serial) != SERIAL_BYTES:
            raise ValueError(f"serial must be {SERIAL_BYTES} bytes")
        if not self.not_before < self.not_after:
            raise ValueError("not_before must precede not_after")
        self.subject.validate()
        if not self.issuer_id or len(self.issuer_id.encode()) > MAX_FIELD_BYTES:
            raise ValueError("bad issuer id")


@dataclass(frozen=True)
class VerifiedIdentity:
    subject: SubjectInfo
    roles: tuple[str, ...]
    public_key: crypto.PublicKey

    @property
    def username(self) -> str:
        return self.subject.username


def _tbs_fields(cert: IdentityCertificate) -> list[tuple[int, bytes]]:
    return [
        (_TAG_SERIAL, cert.serial),
        (_TAG_USERNAME, cert.subject.username.encode("utf-8")),
        (_TAG_LOCATION, cert.subject.location.encode("utf-8")),
        (_TAG_ORGANIZATION, cert.subject.organization.encode("utf-8")),
        (_TAG_EMAIL, cert.subject.email.encode("utf-8")),
        (_TAG_ISSUER, cert.issuer_id.encode("utf-8")),
        (_TAG_NOT_BEFORE, encode_u64(cert.not_before)),
        (_TAG_NOT_AFTER, encode_u64(cert.not_after)),
        (_TAG_ROLES, pack_entries([r.encode("ascii") for r in cert.roles])),
        (_TAG_PUBKEY, cert.subject_public_key.encode()),
    ]


def encode_tbs(cert: IdentityCertificate) -> bytes:
    """Canonical to-be-signed bytes (everything except the signature)."""
    for _, value in _tbs_fields(cert)[1:6]:
        if len(value) > MAX_FIELD_BYTES:
            raise EncodingError("certificate field exceeds length limit")
    return encode_fields(_tbs_fields(cert))


def encode_certificate(cert: IdentityCertificate) -> bytes:
    return encode_tbs(cert) + encode_fields([(_TAG_SIGNATURE, cert.issuer_signature)])


def decode_certificate(data: bytes) -> IdentityCertificate:
    try:
        values = decode_fields(data, _TBS_TAGS + (_TAG_SIGNATURE,))
        role_names = [r.decode("ascii") for r in unpack_entries(values[8])]
        cert = IdentityCertificate(
            serial=values[0],
            subject=SubjectInfo(
                username=values[1].decode("utf-8"),
                location=values[2].decode("utf-8"),
                organization=values[3].decode("utf-8"),
                email=values[4].decode("utf-8"),
            ),
            issuer_id=values[5].decode("utf-8"),
            not_before=decode_u64(values[6]),
            not_after=decode_u64(values[7]),
            roles=tuple(role_names),
            subject_public_key=crypto.PublicKey.decode(values[9]),
            issuer_signature=values[10],
        )
    except (MalformedData, UnicodeDecodeError, ValueError) as exc:
        raise MalformedCertificate(str(exc)) from None
    # canonical form is the only accepted form
    if list(cert.roles) != role_names:
        raise MalformedCertificate("roles not in canonical order")
    return cert


def issue(
    issuer_sk: crypto.SecretKey,
    issuer_id: str,
    subject: SubjectInfo,
    roles,
    subject_pk: crypto.PublicKey,
    validity_seconds: int,
    now: float,
    rng: Rng,
) -> IdentityCertificate:
    """Create and sign a certificate valid [now, now + validity_seconds]."""
    if validity_seconds <= 0:
        raise ValueError("validity must be positive")
    subject.validate()
    unsigned = IdentityCertificate(
        serial=rng.bytes(SERIAL_BYTES),
        subject=subject,
        issuer_id=issuer_id,
        not_before=int(now),
        not_after=int(now) + int(validity_seconds),
        roles=normalize_roles(roles),
        subject_public_key=subject_pk,
    )
    sig = crypto.sign(issuer_sk, encode_tbs(unsigned))
    return dataclasses.replace(unsigned, issuer_signature=sig)


@dataclass
class TrustStore:
    """Issuer id -> issuer public key. Immutable by convention after setup."""

    anchors: dict[str, crypto.PublicKey] = field(default_factory=dict)

    def add(self, issuer_id: str, pk: crypto.PublicKey) -> None:
        if issuer_id in self.anchors:
            raise ValueError(f"duplicate issuer id {issuer_id!r}")
        self.anchors[issuer_id] = pk

    def get(self, issuer_id: str) -> crypto.PublicKey | None:
        return self.anchors.get(issuer_id)


def validate(
    cert: IdentityCertificate, trust: TrustStore, now: float
) -> VerifiedIdentity:
    """Accept iff issuer known, signature valid over the TBS bytes, and the
    time window contains now. Raises the first failing check's error."""
    issuer_pk = trust.get(cert.issuer_id)
    if issuer_pk is None:
        raise UnknownIssuer(f"issuer {cert.issuer_id!r} not in trust store")
    if not crypto.verify(issuer_pk, encode_tbs(cert), cert.issuer_signature):
        raise BadSignature("issuer signature does not verify")
    if now < cert.not_before:
        raise NotYetValid(f"certificate not valid before {cert.not_before}")
    if now > cert.not_after:
        raise Expired(f"certificate expired at {cert.not_after}")
    return VerifiedIdentity(cert.subject, cert.roles, cert.subject_public_key)


def validate_bytes(data: bytes, trust: TrustStore, now: float) -> VerifiedIdentity:
    return validate(decode_certificate(data), trust, now)


# ---------- on-disk forms


def certificate_to_text(cert: IdentityCertificate) -> str:
    return to_envelope(CERT_LABEL, encode_certificate(cert))


def certificate_from_text(text: str) -> IdentityCertificate:
    return decode_certificate(from_envelope(CERT_LABEL, text))


def write_trust_anchor(path, issuer_id: str, pk: crypto.PublicKey) -> None:
    payload = encode_fields([(0x01, issuer_id.encode("utf-8")), (0x02, pk.encode())])
    with open(path, "w", encoding="ascii") as fh:
        fh.write(to_envelope(ANCHOR_LABEL, payload))


def load_trust_anchor(path) -> tuple[str, crypto.PublicKey]:
    with open(path, "r", encoding="ascii") as fh:
        payload = from_envelope(ANCHOR_LABEL, fh.read())
    issuer_raw, pk_raw = decode_fields(payload, (0x01, 0x02))
    return issuer_raw.decode("utf-8"), crypto.PublicKey.decode(pk_raw)


def trust_store_from_anchor(path) -> TrustStore:
    issuer_id, pk = load_trust_anchor(path)
    store = TrustStore()
    store.add(issuer_id, pk)
    return store


def _write_private(path, text: str) -> None:
    fd = os.open(str(path), os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w", encoding="ascii") as fh:
        fh.write(text)


def write_secret_key_file(path, sk: crypto.SecretKey) -> None:
    _write_private(path, to_envelope(SECRET_KEY_LABEL, sk.encode()))


def load_secret_key_file(path) -> crypto.SecretKey:
    with open(path, "r", encoding="ascii") as fh:
        return crypto.SecretKey.decode(from_envelope(SECRET_KEY_LABEL, fh.read()))


def write_credential_file(path, cert_bytes: bytes, sk: crypto.SecretKey) -> None:
    """Certificate + secret key in one owner-only file (client cache and
    resource-server credentials share this format)."""
    _write_private(
        path,
        to_envelope(CERT_LABEL, cert_bytes)
        + to_envelope(SECRET_KEY_LABEL, sk.encode()),
    )


def load_credential_file(path) -> tuple[IdentityCertificate, bytes, crypto.SecretKey]:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    cert_bytes = from_envelope(CERT_LABEL, text)
    sk = crypto.SecretKey.decode(from_envelope(SECRET_KEY_LABEL, text))
    return decode_certificate(cert_bytes), cert_bytes, sk
