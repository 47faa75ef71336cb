"""Bloom filter for semijoin reduction.

Sized from the classic formulas: m = ceil(-n ln p / (ln 2)^2) bits and
k = ceil((m/n) ln 2) probes. Membership hashing goes through a canonical
byte encoding so that values that compare equal in the engine (1, 1.0,
Decimal("1.00")) hash identically regardless of their Python type.
"""

from __future__ import annotations

import hashlib
import math
import struct
from decimal import Decimal
from fractions import Fraction


def bloom_sizing(n: int, p: float) -> tuple[int, int]:
    n = max(1, n)
    m = math.ceil(-n * math.log(p) / (math.log(2) ** 2))
    m = max(8, m)
    k = math.ceil((m / n) * math.log(2))
    return m, max(1, k)


_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1


def canonical_key_bytes(v) -> bytes:
    """Equality-consistent encoding of a join-key value."""
    if isinstance(v, str):
        return b"s" + v.encode("utf-8")
    if isinstance(v, bool):
        v = int(v)
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return b"f" + struct.pack("<d", v)
        if v.is_integer():
            v = int(v)
        else:
            return b"q" + str(Fraction(v)).encode()
    if isinstance(v, Decimal):
        if not v.is_finite():
            return b"f" + str(v).encode()
        if v == v.to_integral_value():
            v = int(v)
        else:
            return b"q" + str(Fraction(v)).encode()
    if isinstance(v, int):
        if _I64_MIN <= v <= _I64_MAX:
            return b"i" + v.to_bytes(8, "little", signed=True)
        return b"q" + str(v).encode()
    return b"r" + repr(v).encode()


class BloomFilter:
    """Zero-false-negative membership sketch with double hashing."""

    __slots__ = ("m", "k", "bits", "count")

    def __init__(self, n: int, p: float = 0.01):
        self.m, self.k = bloom_sizing(n, p)
        self.bits = bytearray((self.m + 7) // 8)
        self.count = 0

    def _probe(self, value):
        d = hashlib.blake2b(canonical_key_bytes(value), digest_size=16).digest()
        h1 = int.from_bytes(d[:8], "little")
        h2 = int.from_bytes(d[8:], "little") | 1
        for i in range(self.k):
            yield (h1 + i * h2) % self.m

    def add(self, value) -> None:
        for pos in self._probe(value):
            self.bits[pos >> 3] |= 1 << (pos & 7)
        self.count += 1

    def may_contain(self, value) -> bool:
        for pos in self._probe(value):
            if not (self.bits[pos >> 3] >> (pos & 7)) & 1:
                return False
        return True
