"""Socket-side client operations: enrollment, resource access, cache.

These drive the pure client state machines over TCP. TCP gives in-order
lossless delivery, so the retransmission schedule in the state machines is
not exercised here (it belongs to the lossy simulated network); what remains
is connect retry and read timeouts, both surfaced as NetworkFailure.
"""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass

from . import certificate as cert_mod
from . import crypto
from .errors import SsoError
from .protocol import (
    ClientAccess,
    ClientEnroll,
    EnrollmentResult,
    SessionContext,
    TimeoutPolicy,
    decode_app_response,
    encode_app_request,
)
from .rng import Rng
from .wire import (
    WIRE_VERSIONS,
    AppData,
    Challenge,
    ConnAccept,
    Credentials,
    FrameStream,
    SessionGrant,
)


class NetworkFailure(SsoError):
    """Could not reach the server or the connection dropped mid-exchange."""


class HandshakeRejected(NetworkFailure):
    """The server closed the connection mid-handshake without a reply.

    Refusals are deliberately indistinguishable on the wire (no
    username-probing oracle); a connected peer that goes silent after a
    handshake message is how a rejection looks from the client side.
    """


@dataclass
class ClientOptions:
    suite: str = crypto.MODERN_AEAD
    connect_retries: int = 3
    connect_backoff: float = 0.2
    io_timeout: float = 10.0


def _connect(address: tuple[str, int], options: ClientOptions) -> socket.socket:
    last: Exception | None = None
    for attempt in range(options.connect_retries + 1):
        try:
            return socket.create_connection(address, timeout=options.io_timeout)
        except OSError as exc:
            last = exc
            if attempt < options.connect_retries:
                time.sleep(options.connect_backoff * (2**attempt))
    raise NetworkFailure(f"cannot connect to {address[0]}:{address[1]}: {last}")


def _expect(stream: FrameStream, kind, what: str):
    try:
        msg = stream.read_msg()
    except socket.timeout:
        raise NetworkFailure(f"timed out waiting for {what}") from None
    except ConnectionError:
        raise HandshakeRejected(
            f"server closed the connection before {what} (likely a refusal)"
        ) from None
    except OSError as exc:
        raise NetworkFailure(f"connection lost waiting for {what}: {exc}") from None
    if msg is None:
        raise HandshakeRejected(
            f"server closed the connection before {what} (likely a refusal)"
        )
    if not isinstance(msg, kind):
        raise NetworkFailure(f"expected {what}, got {type(msg).__name__}")
    return msg


def enroll(
    address: tuple[str, int],
    username: str,
    password: bytes | str,
    home_pk: crypto.PublicKey,
    options: ClientOptions = ClientOptions(),
    rng: Rng | None = None,
) -> EnrollmentResult:
    """Run Phase 1 against a home server; returns certificate + keypair."""
    rng = rng or Rng()
    fsm = ClientEnroll(
        username,
        password,
        home_pk,
        rng,
        suite=options.suite,
        policy=TimeoutPolicy(handshake_timeout=options.io_timeout),
    )
    sock = _connect(address, options)
    try:
        sock.settimeout(options.io_timeout)
        stream = FrameStream(sock, WIRE_VERSIONS[options.suite])
        stream.write_msg(fsm.start(time.time()))
        m2 = _expect(stream, ConnAccept, "M2")
        stream.write_msg(fsm.on_conn_accept(m2, time.time()))
        m4 = _expect(stream, Credentials, "M4")
        return fsm.on_credentials(m4, time.time())
    finally:
        sock.close()


def access(
    address: tuple[str, int],
    cert: cert_mod.IdentityCertificate,
    cert_bytes: bytes,
    secret_key: crypto.SecretKey,
    trust: cert_mod.TrustStore,
    resource: str,
    body: bytes,
    options: ClientOptions = ClientOptions(),
    rng: Rng | None = None,
) -> tuple[SessionContext, str, bytes]:
    """Run Phase 2 then one request; returns (session, status, response)."""
    rng = rng or Rng()
    fsm = ClientAccess(
        cert,
        cert_bytes,
        secret_key,
        trust,
        rng,
        policy=TimeoutPolicy(handshake_timeout=options.io_timeout),
    )
    first = fsm.start(time.time())  # raises ReEnrollNeeded on local expiry
    sock = _connect(address, options)
    try:
        sock.settimeout(options.io_timeout)
        stream = FrameStream(sock, WIRE_VERSIONS[options.suite])
        stream.write_msg(first)
        r2 = _expect(stream, Challenge, "R2")
        stream.write_msg(fsm.on_challenge(r2, time.time()))
        r4 = _expect(stream, SessionGrant, "R4")
        session = fsm.on_session_grant(r4, time.time())
        request = crypto.sym_encrypt(
            session.key, encode_app_request(resource, body), rng
        )
        stream.write_msg(AppData(request))
        reply = _expect(stream, AppData, "response")
        status, response = decode_app_response(
            crypto.sym_decrypt(session.key, reply.ciphertext)
        )
        return session, status, response
    finally:
        sock.close()


# ---------- credential cache (signon writes, access/inspect read)


def save_cache(path, result: EnrollmentResult) -> None:
    cert_mod.write_credential_file(path, result.cert_bytes, result.keypair.secret)


def load_cache(path):
    return cert_mod.load_credential_file(path)
