"""Cryptographic primitives behind the protocol.

Design constraints that shaped this module:

* Every random draw (nonces, primes, ephemeral keys, IVs) comes from an
  injected Rng, so a whole protocol run is reproducible byte-for-byte from a
  seed. Library RSA key generation cannot do that, so the RSA math lives
  here, on top of gmpy2 bignums: probable primes from the caller's Rng,
  e = 65537, CRT for private operations.
* Signatures are RSASSA-PKCS1-v1_5 over SHA-256 (deterministic padding);
  asymmetric encryption is RSAES-OAEP with SHA-256/MGF1. Both follow RFC
  8017 and are cross-checked in the test suite against the `cryptography`
  library on the same key material.
* Arbitrary-size payloads are encrypted to a public key via SealedBox: a
  fresh 32-byte AES-256-GCM key encrypts the body, OAEP wraps that key.
* Symmetric session encryption is authenticated in both suites: AES-256-GCM
  for "modern-aead", and for "legacy-3des" (kept selectable to mirror the
  original design's cipher choice) 3DES-EDE-CBC with an encrypt-then-MAC
  HMAC-SHA256 tag.

The hash for the whole artifact is SHA-256; the wire version byte pins the
suite so incompatible builds fail on the first frame.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import time
from dataclasses import dataclass

import gmpy2
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.decrepit.ciphers.algorithms import TripleDES
from cryptography.hazmat.primitives.ciphers import Cipher, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .encoding import decode_fields, encode_fields
from .errors import AuthenticationFailure, DecryptionError, MalformedData
from .rng import Rng

NONCE_BYTES = 128  # 1024-bit freshness value
DIGEST_BYTES = 32

MODERN_AEAD = "modern-aead"
LEGACY_3DES = "legacy-3des"
SYM_KEY_BYTES = {MODERN_AEAD: 32, LEGACY_3DES: 24}
SYM_ALG_IDS = {MODERN_AEAD: 0x01, LEGACY_3DES: 0x02}
_SYM_ALG_BY_ID = {v: k for k, v in SYM_ALG_IDS.items()}

RSA_BITS_ALLOWED = (1024, 2048)
_RSA_E = 65537

# DER DigestInfo prefix for SHA-256 (RFC 8017 §9.2 note 1)
_SHA256_PREFIX = bytes.fromhex("3031300d060960864801650304020105000420")
_HLEN = 32

# Negative-control hook: when enabled, seal() passes plaintext through so the
# wire-hygiene predicates can prove they would catch a broken build. Never
# set outside tests.
_INSECURE_NO_SEAL = False
_INSECURE_MARKER = b"\x00INSECURE-NO-SEAL"


def set_insecure_no_seal(enabled: bool) -> None:
    global _INSECURE_NO_SEAL
    _INSECURE_NO_SEAL = bool(enabled)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def gen_nonce(rng: Rng) -> bytes:
    """Fresh 128-byte random value; drives freshness in both phases."""
    return rng.bytes(NONCE_BYTES)


# ---------- RSA keys


@dataclass(frozen=True)
class PublicKey:
    n: int
    e: int

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def byte_length(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def encode(self) -> bytes:
        return encode_fields([(0x01, _int_bytes(self.n)), (0x02, _int_bytes(self.e))])

    @classmethod
    def decode(cls, data: bytes) -> "PublicKey":
        n_raw, e_raw = decode_fields(data, (0x01, 0x02))
        pk = cls(_bytes_int(n_raw), _bytes_int(e_raw))
        if pk.n < 3 or pk.e < 3:
            raise MalformedData("implausible public key")
        return pk


@dataclass(frozen=True)
class SecretKey:
    n: int
    e: int
    d: int
    p: int
    q: int

    @property
    def byte_length(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def public(self) -> PublicKey:
        return PublicKey(self.n, self.e)

    def encode(self) -> bytes:
        return encode_fields(
            [
                (0x01, _int_bytes(self.n)),
                (0x02, _int_bytes(self.e)),
                (0x03, _int_bytes(self.d)),
                (0x04, _int_bytes(self.p)),
                (0x05, _int_bytes(self.q)),
            ]
        )

    @classmethod
    def decode(cls, data: bytes) -> "SecretKey":
        raw = decode_fields(data, (0x01, 0x02, 0x03, 0x04, 0x05))
        return cls(*(_bytes_int(v) for v in raw))


@dataclass(frozen=True)
class AsymKeyPair:
    public: PublicKey
    secret: SecretKey


def _int_bytes(v: int) -> bytes:
    return v.to_bytes((v.bit_length() + 7) // 8 or 1, "big")


def _bytes_int(raw: bytes) -> int:
    if not raw:
        raise MalformedData("empty integer field")
    return int.from_bytes(raw, "big")


def _gen_prime(bits: int, rng: Rng) -> int:
    # Top two bits set so that p*q always has full bit length; low bit set
    # for oddness. Reject primes with p-1 divisible by e up front.
    while True:
        cand = int.from_bytes(rng.bytes(bits // 8), "big")
        cand |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if (cand - 1) % _RSA_E == 0:
            continue
        if gmpy2.is_prime(cand, 40):
            return cand


def gen_keypair(bits: int, rng: Rng) -> AsymKeyPair:
    """Generate an RSA keypair of exactly `bits` modulus bits."""
    if bits not in RSA_BITS_ALLOWED:
        raise ValueError(f"key size must be one of {RSA_BITS_ALLOWED}, got {bits}")
    while True:
        p = _gen_prime(bits // 2, rng)
        q = _gen_prime(bits // 2, rng)
        if p == q:
            continue
        n = p * q
        lam = int(gmpy2.lcm(p - 1, q - 1))
        d = int(gmpy2.invert(_RSA_E, lam))
        return AsymKeyPair(PublicKey(n, _RSA_E), SecretKey(n, _RSA_E, d, p, q))


def timed_gen_keypair(bits: int, rng: Rng) -> tuple[AsymKeyPair, float]:
    """Keypair plus wall-clock generation seconds (benchmark/counter feed)."""
    t0 = time.perf_counter()
    pair = gen_keypair(bits, rng)
    return pair, time.perf_counter() - t0


def _private_op(sk: SecretKey, m: int) -> int:
    # CRT: ~3-4x faster than a straight powmod at these sizes
    mp = gmpy2.powmod(m, sk.d % (sk.p - 1), sk.p)
    mq = gmpy2.powmod(m, sk.d % (sk.q - 1), sk.q)
    h = ((mp - mq) * gmpy2.invert(sk.q, sk.p)) % sk.p
    return int(mq + sk.q * h)


# ---------- signatures (RSASSA-PKCS1-v1_5 with SHA-256)


def _emsa_encode(digest: bytes, k: int) -> bytes:
    t = _SHA256_PREFIX + digest
    if k < len(t) + 11:
        raise ValueError("modulus too small for signature encoding")
    return b"\x00\x01" + b"\xff" * (k - len(t) - 3) + b"\x00" + t


def sign(sk: SecretKey, data: bytes) -> bytes:
    k = sk.byte_length
    em = int.from_bytes(_emsa_encode(sha256(data), k), "big")
    return _private_op(sk, em).to_bytes(k, "big")


def verify(pk: PublicKey, data: bytes, sig: bytes) -> bool:
    """True iff sig was produced over data by the matching secret key.

    Malformed input returns False, never raises.
    """
    k = pk.byte_length
    if len(sig) != k:
        return False
    s = int.from_bytes(sig, "big")
    if s >= pk.n:
        return False
    em = int(gmpy2.powmod(s, pk.e, pk.n)).to_bytes(k, "big")
    try:
        expected = _emsa_encode(sha256(data), k)
    except ValueError:
        return False
    return hmac_mod.compare_digest(em, expected)


# ---------- RSAES-OAEP (SHA-256, MGF1-SHA256, empty label)


def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += sha256(seed + counter.to_bytes(4, "big"))
        counter += 1
    return bytes(out[:length])


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def encrypt_oaep(pk: PublicKey, message: bytes, rng: Rng) -> bytes:
    k = pk.byte_length
    max_len = k - 2 * _HLEN - 2
    if len(message) > max_len:
        raise ValueError(f"OAEP message too long ({len(message)} > {max_len})")
    lhash = sha256(b"")
    db = lhash + b"\x00" * (max_len - len(message)) + b"\x01" + message
    seed = rng.bytes(_HLEN)
    masked_db = _xor(db, _mgf1(seed, k - _HLEN - 1))
    masked_seed = _xor(seed, _mgf1(masked_db, _HLEN))
    em = int.from_bytes(b"\x00" + masked_seed + masked_db, "big")
    return int(gmpy2.powmod(em, pk.e, pk.n)).to_bytes(k, "big")


def decrypt_oaep(sk: SecretKey, ciphertext: bytes) -> bytes:
    k = sk.byte_length
    if len(ciphertext) != k or k < 2 * _HLEN + 2:
        raise DecryptionError("asymmetric decryption failed")
    c = int.from_bytes(ciphertext, "big")
    if c >= sk.n:
        raise DecryptionError("asymmetric decryption failed")
    em = _private_op(sk, c).to_bytes(k, "big")
    masked_seed, masked_db = em[1 : 1 + _HLEN], em[1 + _HLEN :]
    seed = _xor(masked_seed, _mgf1(masked_db, _HLEN))
    db = _xor(masked_db, _mgf1(seed, k - _HLEN - 1))
    sep = db.find(b"\x01", _HLEN)
    bad = em[0] != 0
    bad |= not hmac_mod.compare_digest(db[:_HLEN], sha256(b""))
    bad |= sep < 0 or any(db[_HLEN:sep])
    if bad:
        raise DecryptionError("asymmetric decryption failed")
    return db[sep + 1 :]


# ---------- symmetric keys and authenticated encryption


@dataclass(frozen=True)
class SymKey:
    algorithm: str
    key: bytes

    def __post_init__(self):
        expected = SYM_KEY_BYTES.get(self.algorithm)
        if expected is None:
            raise ValueError(f"unknown symmetric algorithm: {self.algorithm!r}")
        if len(self.key) != expected:
            raise ValueError(
                f"{self.algorithm} key must be {expected} bytes, got {len(self.key)}"
            )

    def encode(self) -> bytes:
        return bytes([SYM_ALG_IDS[self.algorithm]]) + self.key

    @classmethod
    def decode(cls, data: bytes) -> "SymKey":
        if not data or data[0] not in _SYM_ALG_BY_ID:
            raise MalformedData("bad symmetric key encoding")
        alg = _SYM_ALG_BY_ID[data[0]]
        if len(data) != 1 + SYM_KEY_BYTES[alg]:
            raise MalformedData("bad symmetric key length")
        return cls(alg, data[1:])


def gen_sym_key(algorithm: str, rng: Rng) -> SymKey:
    if algorithm not in SYM_KEY_BYTES:
        raise ValueError(f"unknown symmetric algorithm: {algorithm!r}")
    return SymKey(algorithm, rng.bytes(SYM_KEY_BYTES[algorithm]))


def sym_encrypt(key: SymKey, plaintext: bytes, rng: Rng) -> bytes:
    if key.algorithm == MODERN_AEAD:
        nonce = rng.bytes(12)
        return nonce + AESGCM(key.key).encrypt(nonce, plaintext, None)
    return _tdes_encrypt(key.key, plaintext, rng)


def sym_decrypt(key: SymKey, ciphertext: bytes) -> bytes:
    if key.algorithm == MODERN_AEAD:
        if len(ciphertext) < 12 + 16:
            raise AuthenticationFailure("ciphertext too short")
        try:
            return AESGCM(key.key).decrypt(ciphertext[:12], ciphertext[12:], None)
        except InvalidTag:
            raise AuthenticationFailure("authentication failed") from None
    return _tdes_decrypt(key.key, ciphertext)


def _tdes_mac_key(key: bytes) -> bytes:
    return sha256(b"certsso-3des-mac:" + key)


def _tdes_encrypt(key: bytes, plaintext: bytes, rng: Rng) -> bytes:
    # 3DES-EDE-CBC with PKCS#7 padding, then HMAC-SHA256 over iv||ct
    iv = rng.bytes(8)
    pad = 8 - len(plaintext) % 8
    padded = plaintext + bytes([pad]) * pad
    enc = Cipher(TripleDES(key), modes.CBC(iv)).encryptor()
    ct = iv + enc.update(padded) + enc.finalize()
    tag = hmac_mod.new(_tdes_mac_key(key), ct, hashlib.sha256).digest()
    return ct + tag


def _tdes_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) < 8 + 8 + 32:
        raise AuthenticationFailure("ciphertext too short")
    ct, tag = ciphertext[:-32], ciphertext[-32:]
    expected = hmac_mod.new(_tdes_mac_key(key), ct, hashlib.sha256).digest()
    if not hmac_mod.compare_digest(tag, expected):
        raise AuthenticationFailure("authentication failed")
    iv, body = ct[:8], ct[8:]
    if len(body) % 8:
        raise AuthenticationFailure("bad block length")
    dec = Cipher(TripleDES(key), modes.CBC(iv)).decryptor()
    padded = dec.update(body) + dec.finalize()
    pad = padded[-1] if padded else 0
    if not 1 <= pad <= 8 or padded[-pad:] != bytes([pad]) * pad:
        raise AuthenticationFailure("bad padding")
    return padded[:-pad]


# ---------- hybrid sealed box


@dataclass(frozen=True)
class SealedBox:
    """Payload encrypted to a public key: OAEP-wrapped ephemeral AES-256-GCM
    key plus the authenticated body. Any bit flip in either part fails."""

    wrapped_key: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return encode_fields([(0x01, self.wrapped_key), (0x02, self.body)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBox":
        wrapped, body = decode_fields(data, (0x01, 0x02))
        return cls(wrapped, body)


def seal(pk: PublicKey, plaintext: bytes, rng: Rng) -> SealedBox:
    if len(plaintext) >= 1 << 32:
        raise ValueError("plaintext too large to seal")
    if _INSECURE_NO_SEAL:
        return SealedBox(_INSECURE_MARKER, plaintext)
    ephemeral = rng.bytes(32)
    nonce = rng.bytes(12)
    body = nonce + AESGCM(ephemeral).encrypt(nonce, plaintext, None)
    return SealedBox(encrypt_oaep(pk, ephemeral, rng), body)


def unseal(sk: SecretKey, box: SealedBox) -> bytes:
    if _INSECURE_NO_SEAL and box.wrapped_key == _INSECURE_MARKER:
        return box.body
    ephemeral = decrypt_oaep(sk, box.wrapped_key)
    if len(box.body) < 12 + 16:
        raise DecryptionError("sealed box decryption failed")
    try:
        return AESGCM(ephemeral).decrypt(box.body[:12], box.body[12:], None)
    except InvalidTag:
        raise DecryptionError("sealed box decryption failed") from None
