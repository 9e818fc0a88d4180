"""Pure state machines for both authentication phases.

Each machine consumes (incoming message or timeout, current time) and
produces outgoing messages; transports live elsewhere (the daemons bind these
to sockets, the simulator to a virtual network). Nothing here reads the
system clock or global randomness, so identical (seed, message sequence,
clock sequence) inputs give byte-identical transcripts.

Phase 1 (enrollment, client A <-> home server B):
  M1  A->B  username
  M2  B->A  h(N) for a fresh 128-byte nonce N
  M3  A->B  seal(pk_B, username, password, h(h(N)), K_AB)
  M4  B->A  cert, enc_sk = E_KAB(sk_A), N, sig_B(cert || enc_sk || N)

Phase 2 (access, client A <-> resource server S):
  R1  A->S  hint
  R2  S->A  fresh nonce N', server certificate
  R3  A->S  client certificate, sig_A(h(N'))
  R4  S->A  seal(pk_A, K_session, N'), sig_S(sealed bytes)

Freshness rules: the home server accepts M3 only when the double hash
matches its own stored N and the nonce digest has not been seen before
(replay cache); the resource server's challenge is per-connection, so a
recorded R3 never authenticates a second session.

Loss handling: clients retransmit their last message with exponential
backoff (base 0.5 s, factor 2, max 3 retries); servers never retransmit on
their own but re-answer byte-identical duplicates idempotently (same stored
reply, no second issuance) and discard handshake state after the handshake
timeout.
"""

from __future__ import annotations

import threading
from collections import Counter as TallyCounter
from collections import OrderedDict
from dataclasses import dataclass, field

from . import certificate as cert_mod
from . import crypto
from .encoding import decode_fields, encode_fields
from .errors import (
    AuthenticationFailure,
    BadChallengeSignature,
    BadCredentials,
    CertificateError,
    CertInvalid,
    DecryptionError,
    FreshnessMismatch,
    KeyMismatch,
    MalformedCertificate,
    MalformedData,
    NonceMismatch,
    ProtocolOrderError,
    ReEnrollNeeded,
    Refusal,
    ReplayDetected,
    ServerUntrusted,
    SignatureInvalid,
)
from .rng import Rng
from .wire import (
    AccessRequest,
    AppData,
    AuthResponse,
    Challenge,
    ConnAccept,
    ConnRequest,
    Credentials,
    Enroll,
    SessionGrant,
)

KEY_PROBE_MESSAGE = b"certsso key possession probe"


@dataclass(frozen=True)
class TimeoutPolicy:
    handshake_timeout: float = 10.0
    retransmit_base: float = 0.5
    retransmit_factor: float = 2.0
    max_retries: int = 3


@dataclass(frozen=True)
class IssuanceConfig:
    issuer_id: str
    key_bits: int = 2048
    validity_seconds: int = cert_mod.DEFAULT_VALIDITY_SECONDS
    suite: str = crypto.MODERN_AEAD


@dataclass
class SessionContext:
    """Established Phase-2 result; exists only after a completed handshake."""

    peer_username: str
    roles: tuple[str, ...]
    key: crypto.SymKey
    established_at: float
    nonce_digest: bytes


@dataclass
class EnrollmentResult:
    certificate: cert_mod.IdentityCertificate
    cert_bytes: bytes
    keypair: crypto.AsymKeyPair


class ReplayCache:
    """Bounded set of recently accepted nonce digests.

    check_and_insert is atomic; entries expire after the TTL and the oldest
    are evicted past capacity. Shared across connections of one server.
    """

    def __init__(self, ttl: float = 10.0, capacity: int = 1 << 16):
        self.ttl = ttl
        self.capacity = capacity
        self._entries: OrderedDict[tuple[str, bytes], float] = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def check_and_insert(self, context: str, digest: bytes, now: float) -> bool:
        """True if (context, digest) is fresh; records it. False on replay."""
        key = (context, digest)
        with self._lock:
            # constant TTL means expiry order == insertion order
            while self._entries:
                oldest, expiry = next(iter(self._entries.items()))
                if expiry > now:
                    break
                del self._entries[oldest]
            if key in self._entries:
                return False
            self._entries[key] = now + self.ttl
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
            return True


class Counters:
    """Thread-safe event tallies shared by a server's connections."""

    def __init__(self):
        self._lock = threading.Lock()
        self.handshakes_started = 0
        self.handshakes_completed = 0
        self.failed = TallyCounter()
        self.refused = TallyCounter()
        self.certificates_issued = 0
        self.sessions_established = 0
        # (total_seconds, keygen_seconds, served_from_pool)
        self.issuance_samples: list[tuple[float, float, bool]] = []

    def incr(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def count_failure(self, reason: str) -> None:
        with self._lock:
            self.failed[reason] += 1

    def count_refusal(self, reason: str) -> None:
        with self._lock:
            self.refused[reason] += 1

    def record_issuance(self, total_s: float, keygen_s: float, pooled: bool) -> None:
        with self._lock:
            self.issuance_samples.append((total_s, keygen_s, pooled))

    def keygen_share(self) -> float:
        with self._lock:
            total = sum(s[0] for s in self.issuance_samples)
            keygen = sum(s[1] for s in self.issuance_samples)
        return keygen / total if total else 0.0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "handshakes_started": self.handshakes_started,
                "handshakes_completed": self.handshakes_completed,
                "failed": dict(self.failed),
                "refused": dict(self.refused),
                "certificates_issued": self.certificates_issued,
                "sessions_established": self.sessions_established,
                "issuance_samples": len(self.issuance_samples),
            }


def admit(active: int, limit: int) -> None:
    """Connection-admission gate shared by daemons and the simulator."""
    if active >= limit:
        raise Refusal("at-capacity")


def inline_keypair_source(bits: int):
    """Default subject-keypair source: generate on demand, report timing."""

    def take(rng: Rng) -> tuple[crypto.AsymKeyPair, float, bool]:
        pair, seconds = crypto.timed_gen_keypair(bits, rng)
        return pair, seconds, False

    return take


# ---------- sealed payload layouts


def _encode_enroll_secret(
    username: str, password: bytes, hhn: bytes, kab: crypto.SymKey
) -> bytes:
    return encode_fields(
        [
            (0x01, username.encode("utf-8")),
            (0x02, password),
            (0x03, hhn),
            (0x04, kab.encode()),
        ]
    )


def _decode_enroll_secret(data: bytes) -> tuple[str, bytes, bytes, crypto.SymKey]:
    user_raw, password, hhn, kab_raw = decode_fields(data, (0x01, 0x02, 0x03, 0x04))
    if len(hhn) != crypto.DIGEST_BYTES:
        raise MalformedData("bad digest length in enrollment secret")
    return (
        user_raw.decode("utf-8"),
        password,
        hhn,
        crypto.SymKey.decode(kab_raw),
    )


def _encode_session_secret(key: crypto.SymKey, nonce: bytes) -> bytes:
    return encode_fields([(0x01, key.encode()), (0x02, nonce)])


def _decode_session_secret(data: bytes) -> tuple[crypto.SymKey, bytes]:
    key_raw, nonce = decode_fields(data, (0x01, 0x02))
    if len(nonce) != crypto.NONCE_BYTES:
        raise MalformedData("bad nonce length in session secret")
    return crypto.SymKey.decode(key_raw), nonce


def encode_app_request(resource: str, body: bytes) -> bytes:
    return encode_fields([(0x01, resource.encode("utf-8")), (0x02, body)])


def decode_app_request(data: bytes) -> tuple[str, bytes]:
    resource_raw, body = decode_fields(data, (0x01, 0x02))
    return resource_raw.decode("utf-8"), body


def encode_app_response(status: str, body: bytes) -> bytes:
    return encode_fields([(0x01, status.encode("ascii")), (0x02, body)])


def decode_app_response(data: bytes) -> tuple[str, bytes]:
    status_raw, body = decode_fields(data, (0x01, 0x02))
    return status_raw.decode("ascii"), body


# ---------- client-side retransmission timer


class _ClientStateMachine:
    """Shared deadline/backoff logic for the two client-side machines."""

    FAILED = "failed"

    def __init__(self, policy: TimeoutPolicy):
        self.policy = policy
        self.state = "idle"
        self.fail_reason: str | None = None
        self.deadline: float | None = None
        self._last_sent = None
        self._retries = 0
        self._next_retx: float | None = None

    def _begin(self, now: float) -> None:
        self.deadline = now + self.policy.handshake_timeout

    def _arm(self, msg, now: float):
        self._last_sent = msg
        self._retries = 0
        self._next_retx = now + self.policy.retransmit_base
        return msg

    def _disarm(self) -> None:
        self._last_sent = None
        self._next_retx = None

    def _terminal(self) -> bool:
        raise NotImplementedError

    def _fail(self, reason: str) -> None:
        self.state = self.FAILED
        self.fail_reason = reason
        self._disarm()
        self._on_terminal()

    def _on_terminal(self) -> None:
        pass

    def next_wakeup(self) -> float | None:
        if self._terminal():
            return None
        times = [t for t in (self._next_retx, self.deadline) if t is not None]
        return min(times) if times else None

    def on_timeout(self, now: float):
        """Retransmit the last message, or give up; None when nothing to do."""
        if self._terminal():
            return None
        eps = 1e-9
        if self.deadline is not None and now + eps >= self.deadline:
            self._fail("give-up")
            return None
        if self._next_retx is not None and now + eps >= self._next_retx:
            if self._retries >= self.policy.max_retries:
                self._fail("give-up")
                return None
            self._retries += 1
            self._next_retx = now + self.policy.retransmit_base * (
                self.policy.retransmit_factor**self._retries
            )
            return self._last_sent
        return None


# ---------- Phase 1, client


class ClientEnroll(_ClientStateMachine):
    IDLE = "idle"
    SENT_M1 = "sent-m1"
    SENT_M3 = "sent-m3"
    DONE = "done"

    def __init__(
        self,
        username: str,
        password: bytes | str,
        home_pk: crypto.PublicKey,
        rng: Rng,
        suite: str = crypto.MODERN_AEAD,
        policy: TimeoutPolicy = TimeoutPolicy(),
    ):
        super().__init__(policy)
        if not username:
            raise ValueError("username must be non-empty")
        if isinstance(password, str):
            password = password.encode("utf-8")
        self.username = username
        self.password = bytearray(password)
        self.home_pk = home_pk
        self.rng = rng
        self.suite = suite
        self.result: EnrollmentResult | None = None
        self._pending_hn: bytes | None = None
        self._kab: crypto.SymKey | None = None

    def _terminal(self) -> bool:
        return self.state in (self.DONE, self.FAILED)

    def _on_terminal(self) -> None:
        # best-effort scrub; the bytearray is the only long-lived copy
        for i in range(len(self.password)):
            self.password[i] = 0
        self._pending_hn = None

    def start(self, now: float) -> ConnRequest:
        if self.state != self.IDLE:
            raise ProtocolOrderError(f"start() in state {self.state}")
        self._begin(now)
        self.state = self.SENT_M1
        return self._arm(ConnRequest(self.username), now)

    def on_conn_accept(self, m2: ConnAccept, now: float) -> Enroll:
        if self.state != self.SENT_M1:
            raise ProtocolOrderError(f"M2 in state {self.state}")
        self._pending_hn = m2.nonce_digest
        self._kab = crypto.gen_sym_key(self.suite, self.rng)
        secret = _encode_enroll_secret(
            self.username,
            bytes(self.password),
            crypto.sha256(m2.nonce_digest),
            self._kab,
        )
        sealed = crypto.seal(self.home_pk, secret, self.rng)
        self.state = self.SENT_M3
        return self._arm(Enroll(sealed), now)

    def on_credentials(self, m4: Credentials, now: float) -> EnrollmentResult:
        if self.state != self.SENT_M3:
            raise ProtocolOrderError(f"M4 in state {self.state}")
        if crypto.sha256(m4.nonce) != self._pending_hn:
            self._fail("nonce-mismatch")
            raise NonceMismatch("M4 nonce does not hash to the M2 value")
        signed = m4.cert_bytes + m4.enc_sk + m4.nonce
        if not crypto.verify(self.home_pk, signed, m4.sig):
            self._fail("bad-signature")
            raise SignatureInvalid("home server signature on M4 does not verify")
        try:
            sk_bytes = crypto.sym_decrypt(self._kab, m4.enc_sk)
            secret_key = crypto.SecretKey.decode(sk_bytes)
        except (AuthenticationFailure, MalformedData) as exc:
            self._fail("decryption-failure")
            raise AuthenticationFailure(f"cannot recover secret key: {exc}") from None
        try:
            cert = cert_mod.decode_certificate(m4.cert_bytes)
        except MalformedCertificate:
            self._fail("malformed-certificate")
            raise
        probe = crypto.sign(secret_key, KEY_PROBE_MESSAGE)
        if not crypto.verify(cert.subject_public_key, KEY_PROBE_MESSAGE, probe):
            self._fail("key-mismatch")
            raise KeyMismatch("certificate public key does not match secret key")
        self.result = EnrollmentResult(
            certificate=cert,
            cert_bytes=m4.cert_bytes,
            keypair=crypto.AsymKeyPair(cert.subject_public_key, secret_key),
        )
        self.state = self.DONE
        self._disarm()
        self._on_terminal()
        return self.result

    def session_key(self) -> crypto.SymKey:
        """Phase-1 transport key K_AB (exposed for transcript audits)."""
        if self._kab is None:
            raise ProtocolOrderError("K_AB not generated yet")
        return self._kab

    def on_message(self, msg, now: float) -> list:
        if isinstance(msg, ConnAccept):
            return [self.on_conn_accept(msg, now)]
        if isinstance(msg, Credentials):
            self.on_credentials(msg, now)
            return []
        raise ProtocolOrderError(f"{type(msg).__name__} in state {self.state}")


# ---------- Phase 1, home server


@dataclass
class HomeEnv:
    """State one home server shares across enrollment connections."""

    directory: object  # UserDirectory
    keypair: crypto.AsymKeyPair
    issuance: IssuanceConfig
    replay: ReplayCache
    counters: Counters = field(default_factory=Counters)
    keypair_source: object = None
    policy: TimeoutPolicy = TimeoutPolicy()
    max_handshakes: int = 64

    def __post_init__(self):
        if self.keypair_source is None:
            self.keypair_source = inline_keypair_source(self.issuance.key_bits)


class HomeServerConn:
    AWAIT_M1 = "await-m1"
    SENT_M2 = "sent-m2"
    DONE = "done"
    FAILED = "failed"

    def __init__(self, env: HomeEnv, rng: Rng, now: float):
        self.env = env
        self.rng = rng
        self.state = self.AWAIT_M1
        self.fail_reason: str | None = None
        self.deadline = now + env.policy.handshake_timeout
        self.nonce: bytes | None = None
        self.username: str | None = None
        self.keygen_seconds = 0.0
        self.keygen_pooled = False
        self._m2: ConnAccept | None = None
        self._m4: Credentials | None = None
        self._accepted_m3_digest: bytes | None = None

    def expired(self, now: float) -> bool:
        return self.state != self.DONE and now > self.deadline

    def _fail(self, reason: str) -> None:
        self.state = self.FAILED
        self.fail_reason = reason
        self.nonce = None

    def on_conn_request(self, m1: ConnRequest, now: float) -> ConnAccept:
        if self.state == self.SENT_M2:
            if m1.username == self.username:
                return self._m2  # idempotent re-answer for a retransmitted M1
            raise ProtocolOrderError("M1 username changed mid-handshake")
        if self.state != self.AWAIT_M1:
            raise ProtocolOrderError(f"M1 in state {self.state}")
        if self.env.directory.get(m1.username) is None:
            self._fail("unknown-user")
            raise Refusal("unknown-user")
        self.username = m1.username
        self.nonce = crypto.gen_nonce(self.rng)
        self._m2 = ConnAccept(crypto.sha256(self.nonce))
        self.state = self.SENT_M2
        return self._m2

    def on_enroll(self, m3: Enroll, now: float) -> Credentials:
        sealed_digest = crypto.sha256(m3.sealed.to_bytes())
        if self.state == self.DONE:
            if sealed_digest == self._accepted_m3_digest:
                return self._m4  # client lost M4; re-answer, nothing re-issued
            raise ProtocolOrderError("different M3 after completion")
        if self.state != self.SENT_M2:
            raise ProtocolOrderError(f"M3 in state {self.state}")

        try:
            plain = crypto.unseal(self.env.keypair.secret, m3.sealed)
            username, password, hhn, kab = _decode_enroll_secret(plain)
            if kab.algorithm != self.env.issuance.suite:
                raise MalformedData("symmetric suite mismatch")
        except (DecryptionError, MalformedData, ValueError) as exc:
            self._fail("decryption-failure")
            raise DecryptionError(f"cannot open M3: {exc}") from None

        if hhn != crypto.sha256(crypto.sha256(self.nonce)):
            self._fail("freshness-mismatch")
            raise FreshnessMismatch("double hash does not match this connection's nonce")
        if not self.env.replay.check_and_insert(
            "enroll", crypto.sha256(self.nonce), now
        ):
            self._fail("replay-detected")
            raise ReplayDetected("nonce digest already accepted")

        record = self.env.directory.get(username)
        if (
            username != self.username
            or record is None
            or not self.env.directory.verify_password(record, password)
        ):
            self._fail("bad-password")
            raise BadCredentials("username/password verification failed")

        subject_pair, self.keygen_seconds, self.keygen_pooled = (
            self.env.keypair_source(self.rng)
        )
        cert = cert_mod.issue(
            issuer_sk=self.env.keypair.secret,
            issuer_id=self.env.issuance.issuer_id,
            subject=record.subject,
            roles=record.roles,
            subject_pk=subject_pair.public,
            validity_seconds=self.env.issuance.validity_seconds,
            now=now,
            rng=self.rng,
        )
        self.env.counters.incr("certificates_issued")
        cert_bytes = cert_mod.encode_certificate(cert)
        enc_sk = crypto.sym_encrypt(kab, subject_pair.secret.encode(), self.rng)
        sig = crypto.sign(
            self.env.keypair.secret, cert_bytes + enc_sk + self.nonce
        )
        self._m4 = Credentials(cert_bytes, enc_sk, self.nonce, sig)
        self._accepted_m3_digest = sealed_digest
        self.state = self.DONE
        return self._m4

    def on_message(self, msg, now: float) -> list:
        if isinstance(msg, ConnRequest):
            return [self.on_conn_request(msg, now)]
        if isinstance(msg, Enroll):
            return [self.on_enroll(msg, now)]
        raise ProtocolOrderError(f"{type(msg).__name__} in state {self.state}")


# ---------- Phase 2, client


class ClientAccess(_ClientStateMachine):
    IDLE = "idle"
    SENT_R1 = "sent-r1"
    SENT_R3 = "sent-r3"
    ESTABLISHED = "established"

    def __init__(
        self,
        cert: cert_mod.IdentityCertificate,
        cert_bytes: bytes,
        secret_key: crypto.SecretKey,
        trust: cert_mod.TrustStore,
        rng: Rng,
        policy: TimeoutPolicy = TimeoutPolicy(),
    ):
        super().__init__(policy)
        self.cert = cert
        self.cert_bytes = cert_bytes
        self.secret_key = secret_key
        self.trust = trust
        self.rng = rng
        self.session: SessionContext | None = None
        self._challenge: bytes | None = None
        self._server_pk: crypto.PublicKey | None = None
        self._server_name: str | None = None

    def _terminal(self) -> bool:
        return self.state in (self.ESTABLISHED, self.FAILED)

    def start(self, now: float) -> AccessRequest:
        if self.state != self.IDLE:
            raise ProtocolOrderError(f"start() in state {self.state}")
        if now > self.cert.not_after:
            raise ReEnrollNeeded("local certificate expired; repeat Phase 1")
        self._begin(now)
        self.state = self.SENT_R1
        return self._arm(AccessRequest(self.cert.subject.username), now)

    def on_challenge(self, r2: Challenge, now: float) -> AuthResponse:
        if self.state != self.SENT_R1:
            raise ProtocolOrderError(f"R2 in state {self.state}")
        try:
            server_id = cert_mod.validate_bytes(r2.server_cert_bytes, self.trust, now)
        except CertificateError as exc:
            self._fail(f"server-untrusted:{exc.reason}")
            raise ServerUntrusted(exc.reason) from None
        self._challenge = r2.nonce
        self._server_pk = server_id.public_key
        self._server_name = server_id.username
        sig = crypto.sign(self.secret_key, crypto.sha256(r2.nonce))
        self.state = self.SENT_R3
        return self._arm(AuthResponse(self.cert_bytes, sig), now)

    def on_session_grant(self, r4: SessionGrant, now: float) -> SessionContext:
        if self.state != self.SENT_R3:
            raise ProtocolOrderError(f"R4 in state {self.state}")
        sealed_bytes = r4.sealed.to_bytes()
        if not crypto.verify(self._server_pk, sealed_bytes, r4.sig):
            self._fail("bad-signature")
            raise SignatureInvalid("server signature on R4 does not verify")
        try:
            key, nonce = _decode_session_secret(
                crypto.unseal(self.secret_key, r4.sealed)
            )
        except (DecryptionError, MalformedData, ValueError) as exc:
            self._fail("decryption-failure")
            raise DecryptionError(f"cannot open session grant: {exc}") from None
        if nonce != self._challenge:
            self._fail("nonce-mismatch")
            raise NonceMismatch("session grant nonce is not this connection's challenge")
        self.session = SessionContext(
            peer_username=self._server_name,
            roles=self.cert.roles,
            key=key,
            established_at=now,
            nonce_digest=crypto.sha256(nonce),
        )
        self.state = self.ESTABLISHED
        self._disarm()
        return self.session

    def on_message(self, msg, now: float) -> list:
        if isinstance(msg, Challenge):
            return [self.on_challenge(msg, now)]
        if isinstance(msg, SessionGrant):
            self.on_session_grant(msg, now)
            return []
        raise ProtocolOrderError(f"{type(msg).__name__} in state {self.state}")


# ---------- Phase 2, resource server


@dataclass
class ResourceEnv:
    """State one resource server shares across access connections."""

    cert_bytes: bytes
    keypair: crypto.AsymKeyPair
    trust: cert_mod.TrustStore
    replay: ReplayCache
    counters: Counters = field(default_factory=Counters)
    suite: str = crypto.MODERN_AEAD
    policy: TimeoutPolicy = TimeoutPolicy()
    max_handshakes: int = 64


class ResourceServerConn:
    AWAIT_R1 = "await-r1"
    SENT_R2 = "sent-r2"
    ESTABLISHED = "established"
    FAILED = "failed"

    def __init__(self, env: ResourceEnv, rng: Rng, now: float):
        self.env = env
        self.rng = rng
        self.state = self.AWAIT_R1
        self.fail_reason: str | None = None
        self.deadline = now + env.policy.handshake_timeout
        self.nonce: bytes | None = None
        self.session: SessionContext | None = None
        self._r2: Challenge | None = None
        self._r4: SessionGrant | None = None
        self._accepted_r3_digest: bytes | None = None

    def expired(self, now: float) -> bool:
        return self.state != self.ESTABLISHED and now > self.deadline

    def _fail(self, reason: str) -> None:
        self.state = self.FAILED
        self.fail_reason = reason

    def on_access_request(self, r1: AccessRequest, now: float) -> Challenge:
        if self.state == self.SENT_R2:
            return self._r2  # idempotent re-answer, same stored nonce
        if self.state != self.AWAIT_R1:
            raise ProtocolOrderError(f"R1 in state {self.state}")
        self.nonce = crypto.gen_nonce(self.rng)
        self._r2 = Challenge(self.nonce, self.env.cert_bytes)
        self.state = self.SENT_R2
        return self._r2

    def on_auth_response(self, r3: AuthResponse, now: float) -> SessionGrant:
        r3_digest = crypto.sha256(r3.cert_bytes + r3.sig)
        if self.state == self.ESTABLISHED:
            if r3_digest == self._accepted_r3_digest:
                return self._r4  # client lost R4; same grant, no new session
            raise ProtocolOrderError("different R3 after establishment")
        if self.state != self.SENT_R2:
            raise ProtocolOrderError(f"R3 in state {self.state}")

        try:
            identity = cert_mod.validate_bytes(r3.cert_bytes, self.env.trust, now)
        except CertificateError as exc:
            self._fail(f"cert-invalid:{exc.reason}")
            raise CertInvalid(exc.reason) from None
        if not crypto.verify(
            identity.public_key, crypto.sha256(self.nonce), r3.sig
        ):
            self._fail("bad-challenge-signature")
            raise BadChallengeSignature(
                "signature over the challenge hash does not verify"
            )
        if not self.env.replay.check_and_insert(
            "access", crypto.sha256(self.nonce), now
        ):
            self._fail("replay-detected")
            raise ReplayDetected("challenge digest already accepted")

        session_key = crypto.gen_sym_key(self.env.suite, self.rng)
        sealed = crypto.seal(
            identity.public_key,
            _encode_session_secret(session_key, self.nonce),
            self.rng,
        )
        sig = crypto.sign(self.env.keypair.secret, sealed.to_bytes())
        self.session = SessionContext(
            peer_username=identity.username,
            roles=identity.roles,
            key=session_key,
            established_at=now,
            nonce_digest=crypto.sha256(self.nonce),
        )
        self.env.counters.incr("sessions_established")
        self._r4 = SessionGrant(sealed, sig)
        self._accepted_r3_digest = r3_digest
        self.state = self.ESTABLISHED
        return self._r4

    def on_message(self, msg, now: float) -> list:
        if isinstance(msg, AccessRequest):
            return [self.on_access_request(msg, now)]
        if isinstance(msg, AuthResponse):
            return [self.on_auth_response(msg, now)]
        if isinstance(msg, AppData):
            raise ProtocolOrderError("AppData handled above the handshake machine")
        raise ProtocolOrderError(f"{type(msg).__name__} in state {self.state}")
