"""Raw mechanics of editing live machine code.

Page arithmetic, page permission changes, rel32 jump encoding, patch stores,
and cache line flushes. Addresses are plain ints (virtual addresses in this
process). Nothing here knows about stubs or branches; that lives one layer up.
"""

from __future__ import annotations

import ctypes
import struct
import sys
from dataclasses import dataclass
from enum import Enum

from . import memory
from .errors import DisplacementOutOfRange, PlatformError
from .memory import PAGE_SIZE, PROT_EXEC, PROT_READ, PROT_WRITE

JMP_REL32_OPCODE = 0xE9
JMP_REL32_LEN = 5  # opcode + 4-byte displacement
DWORD = 4


class ProtectionMode(Enum):
    READ_EXEC = PROT_READ | PROT_EXEC
    READ_WRITE_EXEC = PROT_READ | PROT_WRITE | PROT_EXEC


@dataclass(frozen=True)
class Rel32Patch:
    """Little-endian two's-complement signed 32-bit displacement."""

    data: bytes

    def __post_init__(self):
        if len(self.data) != DWORD:
            raise ValueError("rel32 patch must be exactly 4 bytes")

    @property
    def displacement(self) -> int:
        return struct.unpack("<i", self.data)[0]

    def as_u32(self) -> int:
        """Value whose in-register image stores as these bytes."""
        return int.from_bytes(self.data, "little")


@dataclass(frozen=True)
class PageRegion:
    base: int
    length: int
    page_size: int = PAGE_SIZE

    def __post_init__(self):
        if self.base % self.page_size != 0:
            raise ValueError("region base must be page-aligned")
        if self.length < 1:
            raise ValueError("region length must be >= 1")


def page_base(addr: int, page_size: int = PAGE_SIZE) -> int:
    """Largest multiple of page_size <= addr."""
    if page_size <= 0 or page_size & (page_size - 1):
        raise ValueError("page_size must be a positive power of two")
    return addr - (addr % page_size)


def region_for(addr: int, length: int, page_size: int = PAGE_SIZE) -> PageRegion:
    """Pages covering [addr, addr+length); spans two pages when the range
    straddles a boundary (e.g. a 5-byte jump ending within 5 bytes of one)."""
    base = page_base(addr, page_size)
    end = addr + length
    pages = -(-(end - base) // page_size)
    return PageRegion(base, pages * page_size, page_size)


def set_region_protection(region: PageRegion, mode: ProtectionMode,
                          arena: "memory.ExecArena | None" = None):
    """Apply mode to the region's pages. Raises PlatformError with the OS
    error code on failure (unmapped region, hardened-runtime policy, ...)."""
    if arena is not None:
        arena.protect(region.base, region.length, mode.value)
    else:
        memory.mprotect(region.base, region.length, mode.value)


def encode_rel32(entry: int, target: int, instr_len: int = JMP_REL32_LEN) -> Rel32Patch:
    """Displacement bytes for a jump at `entry` reaching `target`.

    The offset counts from the end of the instruction:
    displacement = target - entry - instr_len.
    """
    disp = target - entry - instr_len
    if not -(1 << 31) <= disp < (1 << 31):
        raise DisplacementOutOfRange()
    packed = bytes([
        disp & 0xFF,
        (disp >> 8) & 0xFF,
        (disp >> 16) & 0xFF,
        (disp >> 24) & 0xFF,
    ])
    if sys.byteorder == "big":  # no big-endian x86 exists; kept for the encoder contract
        packed = packed[::-1]
    return Rel32Patch(packed)


def decode_rel32(patch: Rel32Patch) -> int:
    return patch.displacement


def jump_target(entry: int, patch: Rel32Patch, instr_len: int = JMP_REL32_LEN) -> int:
    return entry + instr_len + patch.displacement


def write_jump(entry: int, patch: Rel32Patch, arm: bool,
               arena: "memory.ExecArena") -> None:
    """Store `patch` into the displacement field of the jump at `entry`.

    With `arm`, the opcode byte at `entry` is written first (0xE9). The four
    displacement bytes are stored with a single 32-bit store. The page must
    be writable; this is checked before any byte is touched so a fault
    surfaces as PlatformError rather than a crash.
    """
    if not arena.page_writable(entry) or not arena.page_writable(entry + JMP_REL32_LEN - 1):
        raise PlatformError(f"code page at {entry:#x} is not writable")
    intr = arena.intrinsics
    if arm:
        intr.store_u8(entry, JMP_REL32_OPCODE)
    intr.store_u32(entry + 1, patch.as_u32())


def read_jump(entry: int) -> "tuple[int, Rel32Patch]":
    raw = ctypes.string_at(entry, JMP_REL32_LEN)
    return raw[0], Rel32Patch(raw[1:])


def flush_code_line(addr: int, arena: "memory.ExecArena") -> None:
    """Flush the cache line containing addr from all cache levels."""
    arena.intrinsics.flush_line(addr)
