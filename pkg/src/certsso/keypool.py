"""Pregenerated RSA keypair pool.

Key generation dominates certificate issuance, so the home server can keep a
bounded queue of ready keypairs filled by one background producer. take()
prefers the pool and falls back to inline generation, reporting which path
served the request and how long any inline generation took so issuance
counters can attribute latency.
"""

from __future__ import annotations

import queue
import threading

from . import crypto
from .rng import Rng


class KeyPool:
    def __init__(self, bits: int, target: int, rng: Rng | None = None):
        if target < 0:
            raise ValueError("pool target must be >= 0")
        self.bits = bits
        self.target = target
        self._rng = rng or Rng()
        self._queue: queue.Queue = queue.Queue(maxsize=max(target, 1))
        self._stop = threading.Event()
        self._paused = threading.Event()
        self._wake = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self.pooled_served = 0
        self.inline_served = 0

    def size(self) -> int:
        return self._queue.qsize()

    def take(self, rng: Rng) -> tuple[crypto.AsymKeyPair, float, bool]:
        """(keypair, inline keygen seconds, served-from-pool)."""
        try:
            pair = self._queue.get_nowait()
        except queue.Empty:
            pair, seconds = crypto.timed_gen_keypair(self.bits, rng)
            with self._lock:
                self.inline_served += 1
            return pair, seconds, False
        with self._lock:
            self.pooled_served += 1
        self._wake.set()
        return pair, 0.0, True

    def refill_once(self) -> bool:
        """Generate one keypair if below target; True when one was added."""
        if self._queue.qsize() >= self.target:
            return False
        pair, _ = crypto.timed_gen_keypair(self.bits, self._rng)
        try:
            self._queue.put_nowait(pair)
        except queue.Full:
            return False
        return True

    def warm(self, timeout: float = 60.0) -> None:
        """Fill to target synchronously (used before benchmark runs)."""
        import time

        deadline = time.monotonic() + timeout
        while self._queue.qsize() < self.target:
            if time.monotonic() > deadline:
                raise TimeoutError("keypool warm-up timed out")
            self.refill_once()

    def pause(self) -> None:
        self._paused.set()

    def resume(self) -> None:
        self._paused.clear()
        self._wake.set()

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(
            target=self._refill_loop, name="keypool-refill", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def _refill_loop(self) -> None:
        while not self._stop.is_set():
            if self._paused.is_set() or not self.refill_once():
                self._wake.wait(timeout=0.05)
                self._wake.clear()
