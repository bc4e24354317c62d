"""Sealed stable storage and throttled monotonic counters.

Sealed blob layout (bit-exact for restore tests):

    magic   4 bytes  b"TPSL"
    version 1 byte   0x01
    counter 8 bytes  big-endian counter value at sealing time
    nonce   12 bytes AEAD nonce
    ciphertext       AEAD over the state blob, AD = header bytes

A blob restores only while its counter equals the hardware counter's current
value, so restoring any snapshot older than the latest persist fails closed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import RateLimited, StaleSnapshot

MAGIC = b"TPSL"
VERSION = 1


@dataclass
class MonotonicCounter:
    """Strictly increasing counter throttled in simulated time.

    Increments are admitted at most rate_limit per simulated second; an
    increment requested early completes at the next free slot (ready time),
    or raises RateLimited in non-blocking mode.
    """

    value: int = 0
    rate_limit: int = 10
    next_slot: float = field(default=0.0)

    def increment(self, now: float) -> tuple[int, float]:
        """Blocking increment: returns (new value, time it completes)."""
        ready = max(now, self.next_slot)
        self.next_slot = ready + 1.0 / self.rate_limit
        self.value += 1
        return self.value, ready

    def try_increment(self, now: float) -> int:
        """Non-blocking increment; raises RateLimited before the next slot."""
        if now < self.next_slot:
            raise RateLimited(f"counter slot not available until {self.next_slot}")
        return self.increment(now)[0]


def _header(counter_value: int) -> bytes:
    return MAGIC + bytes([VERSION]) + struct.pack(">Q", counter_value)


def seal(seal_key: bytes, counter_value: int, state_blob: bytes) -> bytes:
    header = _header(counter_value)
    nonce = hashlib.sha256(b"teepay.seal" + header).digest()[:12]
    ct = ChaCha20Poly1305(seal_key).encrypt(nonce, state_blob, header)
    return header + nonce + ct


def unseal(seal_key: bytes, blob: bytes, expected_counter: int) -> bytes:
    """Open a sealed blob; the counter in the blob must equal the hardware
    counter's current value (roll-back detection)."""
    if len(blob) < 25 or blob[:4] != MAGIC or blob[4] != VERSION:
        raise StaleSnapshot("malformed sealed blob")
    (counter_value,) = struct.unpack(">Q", blob[5:13])
    if counter_value != expected_counter:
        raise StaleSnapshot(
            f"sealed counter {counter_value} != hardware counter {expected_counter}"
        )
    header, nonce, ct = blob[:13], blob[13:25], blob[25:]
    try:
        return ChaCha20Poly1305(seal_key).decrypt(nonce, ct, header)
    except Exception as exc:
        raise StaleSnapshot("sealed blob failed authentication") from exc
