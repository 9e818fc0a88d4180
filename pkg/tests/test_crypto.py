"""Crypto core: primitives, round-trips, and independent-library oracles."""

import hashlib

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from hypothesis import given, settings
from hypothesis import strategies as st

from certsso import crypto
from certsso.errors import (
    AuthenticationFailure,
    DecryptionError,
    MalformedData,
)
from certsso.rng import Rng

# published SHA-256 test vectors (FIPS 180 examples)
SHA256_EMPTY = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
SHA256_ABC = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def _lib_private_key(sk: crypto.SecretKey):
    pub = rsa.RSAPublicNumbers(sk.e, sk.n)
    return rsa.RSAPrivateNumbers(
        p=sk.p,
        q=sk.q,
        d=sk.d,
        dmp1=sk.d % (sk.p - 1),
        dmq1=sk.d % (sk.q - 1),
        iqmp=pow(sk.q, -1, sk.p),
        public_numbers=pub,
    ).private_key()


class TestHash:
    def test_empty_input_reference_vector(self):
        assert crypto.sha256(b"").hex() == SHA256_EMPTY

    def test_abc_reference_vector(self):
        assert crypto.sha256(b"abc").hex() == SHA256_ABC

    def test_deterministic(self):
        data = Rng("hash-det").bytes(500)
        assert crypto.sha256(data) == crypto.sha256(data)

    def test_double_hash_matches_independent_implementation(self):
        nonce = crypto.gen_nonce(Rng("double-hash"))
        expected = hashlib.sha256(hashlib.sha256(nonce).digest()).digest()
        assert crypto.sha256(crypto.sha256(nonce)) == expected

    def test_purity_over_many_inputs(self):
        rng = Rng("hash-purity")
        for _ in range(10_000):
            data = rng.bytes(24)
            first = crypto.sha256(data)
            assert first == crypto.sha256(data)
            assert len(first) == 32


class TestNonce:
    def test_length_is_128_bytes(self):
        assert len(crypto.gen_nonce(Rng())) == 128

    def test_same_seed_same_nonce(self):
        assert crypto.gen_nonce(Rng("seed-x")) == crypto.gen_nonce(Rng("seed-x"))

    def test_stream_advances(self):
        rng = Rng("advance")
        assert crypto.gen_nonce(rng) != crypto.gen_nonce(rng)

    def test_no_collisions_in_10k(self):
        rng = Rng("collisions")
        seen = {crypto.gen_nonce(rng) for _ in range(10_000)}
        assert len(seen) == 10_000


class TestKeypair:
    def test_exact_modulus_bits(self, kp1024, kp2048):
        assert kp1024.public.bits == 1024
        assert kp2048.public.bits == 2048

    def test_invalid_bit_size_rejected(self):
        with pytest.raises(ValueError):
            crypto.gen_keypair(512, Rng())

    def test_sign_verify_roundtrip(self, kp1024):
        sig = crypto.sign(kp1024.secret, b"message")
        assert crypto.verify(kp1024.public, b"message", sig)

    def test_encrypt_decrypt_roundtrip(self, kp1024):
        rng = Rng("oaep-rt")
        msg = rng.bytes(32)
        ct = crypto.encrypt_oaep(kp1024.public, msg, rng)
        assert crypto.decrypt_oaep(kp1024.secret, ct) == msg

    def test_deterministic_given_seed(self):
        a = crypto.gen_keypair(1024, Rng("kg-det"))
        b = crypto.gen_keypair(1024, Rng("kg-det"))
        assert a.public.n == b.public.n and a.secret.d == b.secret.d

    def test_key_serialization_roundtrip(self, kp1024):
        assert crypto.PublicKey.decode(kp1024.public.encode()) == kp1024.public
        assert crypto.SecretKey.decode(kp1024.secret.encode()) == kp1024.secret


class TestSignatures:
    def test_wrong_message_fails(self, kp1024):
        sig = crypto.sign(kp1024.secret, b"message")
        assert not crypto.verify(kp1024.public, b"messagx", sig)

    def test_wrong_key_fails(self, kp1024, kp1024_other):
        sig = crypto.sign(kp1024.secret, b"message")
        assert not crypto.verify(kp1024_other.public, b"message", sig)

    def test_flipped_bit_fails(self, kp1024):
        sig = bytearray(crypto.sign(kp1024.secret, b"message"))
        sig[10] ^= 0x01
        assert not crypto.verify(kp1024.public, b"message", bytes(sig))

    def test_malformed_signature_returns_false(self, kp1024):
        assert not crypto.verify(kp1024.public, b"m", b"")
        assert not crypto.verify(kp1024.public, b"m", b"\xff" * 7)
        assert not crypto.verify(kp1024.public, b"m", b"\xff" * 4096)

    def test_byte_identical_to_cryptography_library(self, kp1024):
        # PKCS#1 v1.5 is deterministic: both implementations must agree exactly
        lib_key = _lib_private_key(kp1024.secret)
        for msg in (b"", b"x", b"the quick brown fox" * 40):
            ours = crypto.sign(kp1024.secret, msg)
            theirs = lib_key.sign(msg, padding.PKCS1v15(), hashes.SHA256())
            assert ours == theirs


class TestOaepInterop:
    def test_library_decrypts_our_ciphertext(self, kp1024):
        lib_key = _lib_private_key(kp1024.secret)
        msg = b"K" * 32
        ct = crypto.encrypt_oaep(kp1024.public, msg, Rng("interop-1"))
        pt = lib_key.decrypt(
            ct,
            padding.OAEP(
                mgf=padding.MGF1(hashes.SHA256()),
                algorithm=hashes.SHA256(),
                label=None,
            ),
        )
        assert pt == msg

    def test_we_decrypt_library_ciphertext(self, kp1024):
        lib_key = _lib_private_key(kp1024.secret)
        msg = b"other direction"
        ct = lib_key.public_key().encrypt(
            msg,
            padding.OAEP(
                mgf=padding.MGF1(hashes.SHA256()),
                algorithm=hashes.SHA256(),
                label=None,
            ),
        )
        assert crypto.decrypt_oaep(kp1024.secret, ct) == msg

    def test_oversize_message_rejected(self, kp1024):
        too_big = b"x" * (kp1024.public.byte_length - 65)
        with pytest.raises(ValueError):
            crypto.encrypt_oaep(kp1024.public, too_big, Rng())


class TestSealedBox:
    def test_roundtrip_1kb(self, kp1024):
        rng = Rng("seal-1k")
        payload = rng.bytes(1024)
        assert crypto.unseal(kp1024.secret, crypto.seal(kp1024.public, payload, rng)) == payload

    def test_fresh_ephemeral_key_per_call(self, kp1024):
        rng = Rng("seal-fresh")
        a = crypto.seal(kp1024.public, b"same plaintext", rng)
        b = crypto.seal(kp1024.public, b"same plaintext", rng)
        assert a.body != b.body and a.wrapped_key != b.wrapped_key

    def test_wrong_key_fails(self, kp1024, kp1024_other):
        box = crypto.seal(kp1024.public, b"secret", Rng("seal-wrong"))
        with pytest.raises(DecryptionError):
            crypto.unseal(kp1024_other.secret, box)

    def test_tampered_body_fails(self, kp1024):
        box = crypto.seal(kp1024.public, b"secret", Rng("seal-tb"))
        bad = crypto.SealedBox(box.wrapped_key, box.body[:-1] + bytes([box.body[-1] ^ 1]))
        with pytest.raises(DecryptionError):
            crypto.unseal(kp1024.secret, bad)

    def test_tampered_wrapped_key_fails(self, kp1024):
        box = crypto.seal(kp1024.public, b"secret", Rng("seal-tw"))
        wrapped = bytearray(box.wrapped_key)
        wrapped[5] ^= 0xFF
        with pytest.raises(DecryptionError):
            crypto.unseal(kp1024.secret, crypto.SealedBox(bytes(wrapped), box.body))

    def test_bytes_roundtrip(self, kp1024):
        box = crypto.seal(kp1024.public, b"abc", Rng("seal-bytes"))
        assert crypto.SealedBox.from_bytes(box.to_bytes()) == box


class TestSymmetric:
    @pytest.mark.parametrize("alg", [crypto.MODERN_AEAD, crypto.LEGACY_3DES])
    def test_roundtrip_4kb(self, alg):
        rng = Rng(f"sym-{alg}")
        key = crypto.gen_sym_key(alg, rng)
        payload = rng.bytes(4096)
        assert crypto.sym_decrypt(key, crypto.sym_encrypt(key, payload, rng)) == payload

    @pytest.mark.parametrize("alg", [crypto.MODERN_AEAD, crypto.LEGACY_3DES])
    def test_wrong_key_is_authentication_failure(self, alg):
        rng = Rng(f"sym-wk-{alg}")
        key, other = crypto.gen_sym_key(alg, rng), crypto.gen_sym_key(alg, rng)
        ct = crypto.sym_encrypt(key, b"payload", rng)
        with pytest.raises(AuthenticationFailure):
            crypto.sym_decrypt(other, ct)

    @pytest.mark.parametrize("alg", [crypto.MODERN_AEAD, crypto.LEGACY_3DES])
    def test_tamper_detected(self, alg):
        rng = Rng(f"sym-t-{alg}")
        key = crypto.gen_sym_key(alg, rng)
        ct = bytearray(crypto.sym_encrypt(key, b"payload", rng))
        ct[len(ct) // 2] ^= 0x80
        with pytest.raises(AuthenticationFailure):
            crypto.sym_decrypt(key, bytes(ct))

    @pytest.mark.parametrize("alg", [crypto.MODERN_AEAD, crypto.LEGACY_3DES])
    def test_empty_plaintext(self, alg):
        rng = Rng(f"sym-e-{alg}")
        key = crypto.gen_sym_key(alg, rng)
        assert crypto.sym_decrypt(key, crypto.sym_encrypt(key, b"", rng)) == b""

    def test_key_lengths(self):
        rng = Rng("sym-len")
        assert len(crypto.gen_sym_key(crypto.MODERN_AEAD, rng).key) == 32
        # standard 3-key triple-DES size
        assert len(crypto.gen_sym_key(crypto.LEGACY_3DES, rng).key) == 24

    def test_distinct_keys(self):
        rng = Rng("sym-two")
        assert crypto.gen_sym_key(crypto.MODERN_AEAD, rng) != crypto.gen_sym_key(
            crypto.MODERN_AEAD, rng
        )

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(ValueError):
            crypto.gen_sym_key("rot13", Rng())
        with pytest.raises(MalformedData):
            crypto.SymKey.decode(b"\x7f" + b"0" * 32)


_PROP_KEYS: dict[str, crypto.AsymKeyPair] = {}


def _prop_key(label: str) -> crypto.AsymKeyPair:
    if label not in _PROP_KEYS:
        _PROP_KEYS[label] = crypto.gen_keypair(1024, Rng(f"prop-key:{label}"))
    return _PROP_KEYS[label]


@settings(max_examples=30, deadline=None)
@given(payload=st.binary(min_size=0, max_size=600), seed=st.integers(0, 2**32))
def test_seal_unseal_roundtrip_property(payload, seed):
    rng = Rng(seed)
    pair = _prop_key("seal")
    assert crypto.unseal(pair.secret, crypto.seal(pair.public, payload, rng)) == payload


@settings(max_examples=30, deadline=None)
@given(data=st.binary(min_size=0, max_size=600))
def test_sign_verify_property(data):
    pair = _prop_key("sign")
    sig = crypto.sign(pair.secret, data)
    assert crypto.verify(pair.public, data, sig)
    assert not crypto.verify(pair.public, data + b"\x00", sig)


@settings(max_examples=40, deadline=None)
@given(
    payload=st.binary(min_size=0, max_size=2000),
    alg=st.sampled_from([crypto.MODERN_AEAD, crypto.LEGACY_3DES]),
    seed=st.integers(0, 2**32),
)
def test_sym_roundtrip_property(payload, alg, seed):
    rng = Rng(seed)
    key = crypto.gen_sym_key(alg, rng)
    assert crypto.sym_decrypt(key, crypto.sym_encrypt(key, payload, rng)) == payload
