"""Executable memory arena and generated store/flush intrinsics.

Everything this package executes or patches lives inside one anonymous
mapping, so relative jumps and calls between stubs, targets, and measurement
loops are always within rel32 range. The arena is carved into:

  * a code region for targets, helper snippets, and benchmark kernels
    (left read/write/execute for the process lifetime — fast mode default);
  * "fast" stub pages, also left read/write/execute;
  * "safe" stub pages, kept read/execute except inside an explicit unlock
    window.

Patch stores are performed by tiny generated functions rather than libc
memmove, so a 4-byte offset write is guaranteed to execute as a single
32-bit store instruction.
"""

from __future__ import annotations

import ctypes
import mmap
import platform

from . import _asm
from ._asm import Asm, RAX, RDI, RSI, RDX
from .errors import PlatformError, UnsupportedPlatform

PAGE_SIZE = mmap.PAGESIZE

PROT_READ = 0x1
PROT_WRITE = 0x2
PROT_EXEC = 0x4
_MAP_PRIVATE = 0x02
_MAP_ANONYMOUS = 0x20

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = (ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                       ctypes.c_int, ctypes.c_int, ctypes.c_long)
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = (ctypes.c_void_p, ctypes.c_size_t)
_libc.mprotect.restype = ctypes.c_int
_libc.mprotect.argtypes = (ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int)


def host_supported() -> bool:
    return platform.system() == "Linux" and platform.machine() == "x86_64"


def require_supported_host():
    if not host_supported():
        raise UnsupportedPlatform(
            f"requires x86-64 Linux, found {platform.system()}/{platform.machine()}"
        )


def mprotect(addr: int, length: int, prot: int):
    if _libc.mprotect(ctypes.c_void_p(addr), length, prot) != 0:
        err = ctypes.get_errno()
        raise PlatformError(f"mprotect({addr:#x}, {length}, {prot:#x}) failed", err)


class ExecArena:
    """A bump allocator over one read/write/execute anonymous mapping."""

    def __init__(self, size: int = 4 << 20):
        require_supported_host()
        size = -(-size // PAGE_SIZE) * PAGE_SIZE
        base = _libc.mmap(None, size,
                          PROT_READ | PROT_WRITE | PROT_EXEC,
                          _MAP_PRIVATE | _MAP_ANONYMOUS, -1, 0)
        if base in (None, ctypes.c_void_p(-1).value):
            err = ctypes.get_errno()
            raise UnsupportedPlatform(
                f"cannot map read/write/execute memory (errno {err}); "
                "the platform refuses executable page allocation"
            )
        self.base = base
        self.size = size
        self._cursor = base
        # Protection ledger: page address -> prot flags we last applied.
        self._page_prot = {}
        for off in range(0, size, PAGE_SIZE):
            self._page_prot[base + off] = PROT_READ | PROT_WRITE | PROT_EXEC
        self._intrinsics = None

    def close(self):
        if self.base:
            _libc.munmap(ctypes.c_void_p(self.base), self.size)
            self.base = 0

    # -- allocation ---------------------------------------------------------

    def reserve(self, length: int, align: int = 16) -> int:
        addr = -(-self._cursor // align) * align
        if addr + length > self.base + self.size:
            raise PlatformError("code arena exhausted")
        self._cursor = addr + length
        return addr

    def reserve_pages(self, count: int) -> int:
        """Page-aligned reservation, for stub pages with their own protection."""
        return self.reserve(count * PAGE_SIZE, align=PAGE_SIZE)

    def write(self, addr: int, data: bytes):
        ctypes.memmove(addr, data, len(data))

    def place(self, asm: Asm, align: int = 16) -> int:
        """Reserve space for `asm`, resolve its fixups there, and write it."""
        addr = self.reserve(len(asm), align)
        self.write(addr, asm.code(at=addr))
        return addr

    def place_code(self, data: bytes, align: int = 16) -> int:
        addr = self.reserve(len(data), align)
        self.write(addr, data)
        return addr

    # -- protection bookkeeping ----------------------------------------------

    def protect(self, addr: int, length: int, prot: int):
        start = addr - (addr % PAGE_SIZE)
        end = addr + length
        mprotect(start, end - start, prot)
        page = start
        while page < end:
            if self.base <= page < self.base + self.size:
                self._page_prot[page] = prot
            page += PAGE_SIZE

    def page_writable(self, addr: int) -> bool:
        page = addr - (addr % PAGE_SIZE)
        prot = self._page_prot.get(page)
        if prot is not None:
            return bool(prot & PROT_WRITE)
        return _maps_writable(addr)

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    # -- generated intrinsics --------------------------------------------------

    @property
    def intrinsics(self) -> "Intrinsics":
        if self._intrinsics is None:
            self._intrinsics = Intrinsics(self)
        return self._intrinsics


def _maps_writable(addr: int) -> bool:
    """Slow path for addresses outside any arena: consult /proc/self/maps."""
    for start, end, perms in iter_maps():
        if start <= addr < end:
            return "w" in perms
    return False


def iter_maps():
    with open("/proc/self/maps") as f:
        for line in f:
            rng, perms = line.split()[:2]
            lo, hi = rng.split("-")
            yield int(lo, 16), int(hi, 16), perms


def region_protection(addr: int) -> str:
    """Permission string ('rwxp'...) of the mapping containing addr."""
    for start, end, perms in iter_maps():
        if start <= addr < end:
            return perms
    raise PlatformError(f"address {addr:#x} not found in /proc/self/maps")


class Intrinsics:
    """Single-instruction store/flush/tsc helpers, callable from Python."""

    def __init__(self, arena: ExecArena):
        # mov [rdi], sil ; ret
        a = Asm()
        a.store(RDI, 0, RSI, 1)
        a.ret()
        self._store8_addr = arena.place(a)
        self._store8 = ctypes.CFUNCTYPE(None, ctypes.c_void_p, ctypes.c_uint64)(
            self._store8_addr)

        # mov [rdi], esi ; ret  — the 4-byte patch store
        a = Asm()
        a.store(RDI, 0, RSI, 4)
        a.ret()
        self._store32_addr = arena.place(a)
        self._store32 = ctypes.CFUNCTYPE(None, ctypes.c_void_p, ctypes.c_uint64)(
            self._store32_addr)

        # clflush [rdi] ; ret
        a = Asm()
        a.clflush(RDI, 0)
        a.ret()
        self._clflush_addr = arena.place(a)
        self._clflush = ctypes.CFUNCTYPE(None, ctypes.c_void_p)(self._clflush_addr)

        # serialized timestamp read
        a = Asm()
        a.serialized_tsc()
        a.ret()
        self._tsc_addr = arena.place(a)
        self._tsc = ctypes.CFUNCTYPE(ctypes.c_uint64)(self._tsc_addr)

        # clflush [rdi] ; 128 dependent adds ; ret — temporal barrier after a
        # patch store (cache flush plus a fixed unit of computational work)
        a = Asm()
        a.clflush(RDI, 0)
        a.xor_rr(RAX, RAX)
        for _ in range(128):
            a.add_ri(RAX, 1)
        a.ret()
        self._smc_buffer_addr = arena.place(a)
        self._smc_buffer = ctypes.CFUNCTYPE(ctypes.c_uint64, ctypes.c_void_p)(
            self._smc_buffer_addr)

    def store_u8(self, addr: int, value: int):
        self._store8(addr, value & 0xFF)

    def store_u32(self, addr: int, value: int):
        self._store32(addr, value & 0xFFFFFFFF)

    def flush_line(self, addr: int):
        self._clflush(addr)

    def read_tsc(self) -> int:
        return self._tsc()

    def smc_buffer(self, addr: int) -> int:
        return self._smc_buffer(addr)
