"""HyperLogLog++ distinct-value sketch, dense representation only.

Fixed precision p=14: 2**14 six-bit registers, 16 KiB unpacked. Values are
hashed to 64 bits, the top p bits pick a register, and the register keeps the
maximum over 1 + leading-zero-count of the remaining 50 bits. Merging two
sketches is an element-wise register max, so a merged sketch is bit-identical
to the sketch of the union stream. Below ~2.5m the raw estimator is replaced
by linear counting over empty registers.
"""

from __future__ import annotations

import math
import struct
from hashlib import blake2b

P = 14
M = 1 << P  # register count
_VALUE_BITS = 64 - P
_ALPHA = 0.7213 / (1.0 + 1.079 / M)
_LC_THRESHOLD = 2.5 * M

_pack_int = struct.Struct("<q").pack
_pack_float = struct.Struct("<d").pack


def hash64(data: bytes) -> int:
    return int.from_bytes(blake2b(data, digest_size=8).digest(), "little")


def _encode(value) -> bytes:
    # One canonical byte form per storage representation; a column never mixes
    # kinds, the tag just keeps cross-type accidents impossible.
    if value is True or value is False:
        return b"b\x01" if value else b"b\x00"
    if isinstance(value, int):
        return b"i" + _pack_int(value)
    if isinstance(value, float):
        return b"f" + _pack_float(value)
    if isinstance(value, str):
        return b"s" + value.encode("utf-8")
    raise TypeError(f"unhashable sketch value {value!r}")


class HllSketch:
    __slots__ = ("registers",)

    def __init__(self, registers: bytearray | None = None):
        if registers is None:
            registers = bytearray(M)
        elif len(registers) != M:
            raise ValueError("register array has wrong size")
        self.registers = registers

    def add(self, value) -> None:
        """Add one non-null value. Nulls are the caller's business to skip."""
        h = hash64(_encode(value))
        idx = h >> _VALUE_BITS
        w = h & ((1 << _VALUE_BITS) - 1)
        rank = _VALUE_BITS - w.bit_length() + 1
        regs = self.registers
        if rank > regs[idx]:
            regs[idx] = rank

    def add_all(self, values) -> None:
        for v in values:
            if v is not None:
                self.add(v)

    def merge(self, other: "HllSketch") -> None:
        mine, theirs = self.registers, other.registers
        for i in range(M):
            if theirs[i] > mine[i]:
                mine[i] = theirs[i]

    def estimate(self) -> float:
        regs = self.registers
        total = 0.0
        zeros = 0
        for r in regs:
            total += 2.0 ** (-r)
            if r == 0:
                zeros += 1
        raw = _ALPHA * M * M / total
        if raw <= _LC_THRESHOLD and zeros > 0:
            return M * math.log(M / zeros)
        return raw

    def is_empty(self) -> bool:
        return not any(self.registers)

    def copy(self) -> "HllSketch":
        return HllSketch(bytearray(self.registers))

    def __eq__(self, other) -> bool:
        return isinstance(other, HllSketch) and self.registers == other.registers

    def to_bytes(self) -> bytes:
        """Pack the 6-bit registers, four per three bytes."""
        regs = self.registers
        out = bytearray((M * 6) // 8)
        oi = 0
        for i in range(0, M, 4):
            a, b, c, d = regs[i], regs[i + 1], regs[i + 2], regs[i + 3]
            bits = (a << 18) | (b << 12) | (c << 6) | d
            out[oi] = bits >> 16
            out[oi + 1] = (bits >> 8) & 0xFF
            out[oi + 2] = bits & 0xFF
            oi += 3
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HllSketch":
        if len(data) != (M * 6) // 8:
            raise ValueError("packed sketch has wrong size")
        regs = bytearray(M)
        ri = 0
        for i in range(0, len(data), 3):
            bits = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2]
            regs[ri] = (bits >> 18) & 0x3F
            regs[ri + 1] = (bits >> 12) & 0x3F
            regs[ri + 2] = (bits >> 6) & 0x3F
            regs[ri + 3] = bits & 0x3F
            ri += 4
        return cls(regs)


def sketch_of(values) -> HllSketch:
    s = HllSketch()
    s.add_all(values)
    return s
