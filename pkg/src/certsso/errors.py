"""Exception hierarchy.

Every failure a peer can trigger maps to a typed error below; nothing in the
protocol path is allowed to escape as a bare exception or kill the process.
"""


class SsoError(Exception):
    """Base class for all errors raised by this package."""


# ---------- crypto

class CryptoError(SsoError):
    pass


class EntropyError(CryptoError):
    """System entropy source unavailable while seeding an Rng."""


class DecryptionError(CryptoError):
    """Sealed-box or asymmetric decryption failed; the cause is deliberately
    not distinguished (wrong key and tampered ciphertext look identical)."""


class AuthenticationFailure(DecryptionError):
    """Authenticated symmetric decryption failed (wrong key or tamper)."""


# ---------- encoding

class EncodingError(SsoError):
    pass


class MalformedData(EncodingError):
    """TLV or envelope input that cannot be parsed strictly."""


# ---------- wire

class WireError(SsoError):
    pass


class BadMagic(WireError):
    pass


class UnknownVersion(WireError):
    pass


class UnknownMessageType(WireError):
    pass


class LengthMismatch(WireError):
    """Exact-frame decode saw trailing bytes after a complete frame."""


class FrameTooLarge(WireError):
    pass


class Truncated(WireError):
    """Stream closed in the middle of a frame."""


class NeedMoreData(Exception):
    """Streaming signal: the buffer holds only a frame prefix. Control flow,
    not a failure, hence not an SsoError."""


# ---------- certificate

class CertificateError(SsoError):
    reason = "certificate"


class UnknownIssuer(CertificateError):
    reason = "unknown-issuer"


class BadSignature(CertificateError):
    reason = "bad-signature"


class Expired(CertificateError):
    reason = "expired"


class NotYetValid(CertificateError):
    reason = "not-yet-valid"


class MalformedCertificate(CertificateError):
    reason = "malformed"


# ---------- protocol

class ProtocolError(SsoError):
    reason = "protocol"


class ProtocolOrderError(ProtocolError):
    """Message arrived in a state that does not accept it; the state machine
    is left unchanged."""
    reason = "protocol-order"


class FreshnessMismatch(ProtocolError):
    reason = "freshness-mismatch"


class ReplayDetected(ProtocolError):
    reason = "replay-detected"


class BadCredentials(ProtocolError):
    reason = "bad-password"


class NonceMismatch(ProtocolError):
    reason = "nonce-mismatch"


class KeyMismatch(ProtocolError):
    """Decrypted secret key does not match the certificate's public key."""
    reason = "key-mismatch"


class SignatureInvalid(ProtocolError):
    """A protocol message signature failed to verify."""
    reason = "bad-signature"


class BadChallengeSignature(ProtocolError):
    reason = "bad-challenge-signature"


class ServerUntrusted(ProtocolError):
    """Server certificate rejected; carries the certificate sub-reason."""
    reason = "server-untrusted"

    def __init__(self, sub_reason, *args):
        super().__init__(*args or (f"server certificate rejected: {sub_reason}",))
        self.sub_reason = sub_reason


class CertInvalid(ProtocolError):
    """Client certificate rejected during Phase 2; carries the sub-reason."""
    reason = "cert-invalid"

    def __init__(self, sub_reason, *args):
        super().__init__(*args or (f"client certificate rejected: {sub_reason}",))
        self.sub_reason = sub_reason


class ReEnrollNeeded(ProtocolError):
    """Local certificate expired; Phase 1 must be repeated."""
    reason = "re-enroll-needed"


class Refusal(ProtocolError):
    """Connection refused before the handshake; the typed reason stays
    server-side, the peer only sees the connection close."""

    def __init__(self, reason, *args):
        super().__init__(*args or (f"refused: {reason}",))
        self.reason = reason


# ---------- configuration / storage

class ConfigError(SsoError):
    pass


class UserDbError(SsoError):
    pass


class CacheError(SsoError):
    """Client credential cache missing or unreadable."""
