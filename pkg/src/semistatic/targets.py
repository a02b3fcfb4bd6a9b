"""Sample branch targets, assembled into a runtime's arena.

These cover the shapes the tests and benchmarks need: integer arithmetic
pairs, empty bodies, id-returning markers, counter bumps, and an
order-sending body (64-byte message copy plus a flag flip).
"""

from __future__ import annotations

import ctypes

from ._asm import Asm, RAX, RCX, RDI, RDX, RSI
from .branch import Runtime, Signature

SIG_I64_BINOP = Signature(ctypes.c_int64, (ctypes.c_int64, ctypes.c_int64))
SIG_I64_NOARG = Signature(ctypes.c_int64, ())
SIG_VOID_NOARG = Signature(None, ())
SIG_VOID_PTR = Signature(None, (ctypes.c_void_p,))


def add_i64(rt: Runtime) -> int:
    a = Asm()
    a.lea(RAX, RDI, 0)
    a.add_rr(RAX, RSI)
    a.ret()
    return rt.place(a)


def sub_i64(rt: Runtime) -> int:
    a = Asm()
    a.mov_rr(RAX, RDI)
    a.sub_rr(RAX, RSI)
    a.ret()
    return rt.place(a)


def xor_i64(rt: Runtime) -> int:
    a = Asm()
    a.mov_rr(RAX, RDI)
    a.xor_rr(RAX, RSI)
    a.ret()
    return rt.place(a)


def mul_i64(rt: Runtime) -> int:
    a = Asm()
    a.mov_rr(RAX, RDI)
    a.imul_rr(RAX, RSI)
    a.ret()
    return rt.place(a)


def const_i64(rt: Runtime, value: int) -> int:
    a = Asm()
    a.mov_ri(RAX, value & ((1 << 64) - 1))
    a.ret()
    return rt.place(a)


def empty(rt: Runtime) -> int:
    """Plain `ret` — an empty branch body."""
    a = Asm()
    a.ret()
    return rt.place(a)


def counter_bump(rt: Runtime, counter_addr: int, ident: int) -> int:
    """Increments a 64-bit counter in memory and returns `ident`."""
    a = Asm()
    a.mov_ri(RCX, counter_addr)
    a.inc_mem(RCX, 0)
    a.mov_ri(RAX, ident)
    a.ret()
    return rt.place(a)


def send_order(rt: Runtime, payload_addr: int, flag_addr: int) -> int:
    """Copy a 64-byte message (arg: pointer) to the payload and flip the flag.

    The copy is byte-granular, matching a copy into a volatile device
    register block: 64 loads and 64 stores, no coalescing.
    """
    a = Asm()
    a.mov_ri(RCX, payload_addr)
    for off in range(64):
        a.load(RAX, RDI, off, 1)
        a.store(RCX, off, RAX, 1)
    a.mov_ri(RCX, flag_addr)
    a.load(RAX, RCX, 0, 1)
    a.raw(bytes([0x83, 0xF0, 0x01]))  # xor eax, 1
    a.store(RCX, 0, RAX, 1)
    a.ret()
    return rt.place(a)


def far_address(rt: Runtime, distance: int = 1 << 34) -> int:
    """An address guaranteed out of rel32 range from the arena (for error tests)."""
    return rt.arena.base + distance
