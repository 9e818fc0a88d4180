"""Home-server user directory.

Every client is pre-registered here: username, salted password verifier
(sha256(salt || password) — never the password itself), assigned roles, and
the subject fields copied into issued certificates. On disk the directory is
line-oriented: one base64 TLV record per line, sorted by username, so the
file diffs cleanly.
"""

from __future__ import annotations

import base64
import binascii
import hmac
import threading
from dataclasses import dataclass

from .certificate import SubjectInfo, normalize_roles
from .crypto import sha256
from .encoding import decode_fields, encode_fields, pack_entries, unpack_entries
from .errors import MalformedData, UserDbError
from .rng import Rng

SALT_BYTES = 16


@dataclass(frozen=True)
class UserRecord:
    username: str
    salt: bytes
    verifier: bytes
    roles: tuple[str, ...]
    subject: SubjectInfo


def compute_verifier(salt: bytes, password: bytes | str) -> bytes:
    if isinstance(password, str):
        password = password.encode("utf-8")
    return sha256(salt + password)


def verify_password(record: UserRecord, password: bytes | str) -> bool:
    # constant-time compare; a salted single hash, deliberately dependency-light
    return hmac.compare_digest(
        compute_verifier(record.salt, password), record.verifier
    )


def _encode_record(rec: UserRecord) -> bytes:
    return encode_fields(
        [
            (0x01, rec.username.encode("utf-8")),
            (0x02, rec.salt),
            (0x03, rec.verifier),
            (0x04, pack_entries([r.encode("ascii") for r in rec.roles])),
            (0x05, rec.subject.location.encode("utf-8")),
            (0x06, rec.subject.organization.encode("utf-8")),
            (0x07, rec.subject.email.encode("utf-8")),
        ]
    )


def _decode_record(data: bytes) -> UserRecord:
    vals = decode_fields(data, (0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07))
    username = vals[0].decode("utf-8")
    if len(vals[1]) != SALT_BYTES or len(vals[2]) != 32:
        raise MalformedData("bad salt or verifier length")
    return UserRecord(
        username=username,
        salt=vals[1],
        verifier=vals[2],
        roles=normalize_roles(r.decode("ascii") for r in unpack_entries(vals[3])),
        subject=SubjectInfo(
            username=username,
            location=vals[4].decode("utf-8"),
            organization=vals[5].decode("utf-8"),
            email=vals[6].decode("utf-8"),
        ),
    )


class UserDirectory:
    """Read-mostly username -> UserRecord map behind a lock."""

    def __init__(self):
        self._records: dict[str, UserRecord] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def get(self, username: str) -> UserRecord | None:
        with self._lock:
            return self._records.get(username)

    def usernames(self) -> list[str]:
        with self._lock:
            return sorted(self._records)

    def verify_password(self, record: UserRecord, password: bytes | str) -> bool:
        return verify_password(record, password)

    def add_user(
        self,
        username: str,
        password: bytes | str,
        roles,
        subject: SubjectInfo | None = None,
        rng: Rng | None = None,
    ) -> UserRecord:
        rng = rng or Rng()
        subject = subject or SubjectInfo(username=username)
        if subject.username != username:
            raise UserDbError("subject username must match the record username")
        subject.validate()
        salt = rng.bytes(SALT_BYTES)
        record = UserRecord(
            username=username,
            salt=salt,
            verifier=compute_verifier(salt, password),
            roles=normalize_roles(roles),
            subject=subject,
        )
        with self._lock:
            if username in self._records:
                raise UserDbError(f"duplicate username {username!r}")
            self._records[username] = record
        return record

    def save(self, path) -> None:
        with self._lock:
            records = sorted(self._records.values(), key=lambda r: r.username)
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# certsso user directory v1\n")
            for rec in records:
                fh.write(base64.b64encode(_encode_record(rec)).decode("ascii"))
                fh.write("\n")

    @classmethod
    def load(cls, path) -> "UserDirectory":
        directory = cls()
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    record = _decode_record(base64.b64decode(line, validate=True))
                except (binascii.Error, MalformedData, ValueError) as exc:
                    raise UserDbError(f"{path}: line {lineno}: {exc}") from None
                with directory._lock:
                    if record.username in directory._records:
                        raise UserDbError(
                            f"{path}: line {lineno}: duplicate username "
                            f"{record.username!r}"
                        )
                    directory._records[record.username] = record
        return directory
