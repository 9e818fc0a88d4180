"""Seedable random source.

All randomness in the package flows through an Rng instance so that protocol
runs are exactly reproducible from a seed: nonces, RSA primes, ephemeral keys,
serial numbers and simulated-network decisions all draw from the same kind of
stream. The generator is SHA-256 in counter mode over a 32-byte key; it is
deterministic across platforms and fast enough for every caller here.

An Rng is not shareable between threads; each task owns its own (fork() one
per participant/connection).
"""

from __future__ import annotations

import hashlib
import os

from .errors import EntropyError


class Rng:
    def __init__(self, seed: int | bytes | str | None = None):
        if seed is None:
            try:
                key_material = os.urandom(32)
            except OSError as exc:
                raise EntropyError("system entropy source unavailable") from exc
        elif isinstance(seed, bytes):
            key_material = seed
        elif isinstance(seed, str):
            key_material = seed.encode("utf-8")
        elif isinstance(seed, int):
            key_material = str(seed).encode("ascii")
        else:
            raise TypeError(f"unsupported seed type: {type(seed).__name__}")
        self._key = hashlib.sha256(b"certsso-rng:" + key_material).digest()
        self._counter = 0
        self._buffer = b""

    def bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("byte count must be non-negative")
        out = bytearray(self._buffer)
        while len(out) < n:
            block = hashlib.sha256(
                self._key + self._counter.to_bytes(8, "big")
            ).digest()
            self._counter += 1
            out += block
        self._buffer = bytes(out[n:])
        return bytes(out[:n])

    def u64(self) -> int:
        return int.from_bytes(self.bytes(8), "big")

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.u64() >> 11) / (1 << 53)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        nbits = (n - 1).bit_length()
        if nbits == 0:
            return 0
        nbytes = (nbits + 7) // 8
        shift = nbytes * 8 - nbits
        # rejection sampling keeps the draw unbiased
        while True:
            v = int.from_bytes(self.bytes(nbytes), "big") >> shift
            if v < n:
                return v

    def fork(self, label: str) -> "Rng":
        """Derive an independent stream without disturbing this one."""
        child = Rng.__new__(Rng)
        child._key = hashlib.sha256(
            self._key + b"fork:" + label.encode("utf-8")
        ).digest()
        child._counter = 0
        child._buffer = b""
        return child
