"""Generated measurement loops for the benchmark scenarios.

Every scenario loop is machine code: per iteration it runs some cold setup
(condition loads, direction stores, filler work), then a measured region
wrapped in serialized timestamp reads, and stores the cycle delta into a
sample buffer. Addresses of scenario state (condition arrays, stubs, offset
tables, payloads) are baked in as immediates when the loop is assembled.

Register conventions inside a loop body:
  rbx = iteration index, r12 = iteration count, r13 = sample buffer,
  r14 = region start timestamp; r15 and rbp are free for scenario state.
Caller-saved registers do not survive target calls and are re-materialized
wherever needed.
"""

from __future__ import annotations

import ctypes
import struct

import numpy as np

from .._asm import (
    Asm, RAX, RBX, RCX, RDX, RBP, RDI, RSI, R8, R9, R10, R11, R12, R13, R14, R15,
)
from ..branch import Runtime, SemiStaticBranch

_LOOP_SIG = ctypes.CFUNCTYPE(ctypes.c_uint64, ctypes.c_uint64, ctypes.c_void_p)


class LoopKernel:
    """A placed scenario loop plus metadata about its measured region."""

    def __init__(self, addr: int, fn, measured_spans):
        self.addr = addr
        self._fn = fn
        self.measured_spans = measured_spans  # [(start, end)] byte offsets
        self.code_len = None

    def __call__(self, iterations: int, samples: np.ndarray) -> int:
        assert len(samples) >= iterations
        return self._fn(iterations, samples.ctypes.data)


def build_loop(rt: Runtime, measured, cold=None, setup=None, post=None,
               result_reg=None) -> LoopKernel:
    """Assemble `loop { cold; t0; measured; t1; sample[i] = t1-t0; post }`.

    `setup(a)` runs once before the loop (typically seeding rbp/r15).
    `cold(a)`, `measured(a)`, and `post(a)` emit per-iteration code; the
    measured emitter must preserve rbx/r12/r13/r14 (targets called there
    only touch caller-saved registers). Returns the kernel; its uint64
    return value is `result_reg` (or 0).
    """
    a = Asm()
    for r in (RBX, RBP, R12, R13, R14, R15):
        a.push(r)
    a.mov_rr(R12, RDI)
    a.mov_rr(R13, RSI)
    a.xor_rr(RBX, RBX)
    if setup:
        setup(a)
    a.test_rr(R12, R12)
    done = a.label()
    a.jcc("e", done)
    top = a.bind(a.label())
    if cold:
        cold(a)
    a.serialized_tsc()
    a.mov_rr(R14, RAX)
    m_start = a.here()
    measured(a)
    m_end = a.here()
    a.serialized_tsc()
    a.sub_rr(RAX, R14)
    a.store_sib(R13, RBX, 8, RAX, 8)
    if post:
        post(a)
    a.inc(RBX)
    a.cmp_rr(RBX, R12)
    a.jcc("b", top)
    a.bind(done)
    if result_reg is not None:
        a.mov_rr(RAX, result_reg)
    else:
        a.xor_rr(RAX, RAX)
    for r in (R15, R14, R13, R12, RBP, RBX):
        a.pop(r)
    a.ret()
    addr = rt.place(a, align=64)
    kern = LoopKernel(addr, _LOOP_SIG(addr), [(m_start, m_end)])
    kern.code_len = len(a)
    return kern


def assert_no_patch_in_measured(kernel: LoopKernel, stub_entry: int):
    """Structural check: the measured region never stores to the stub.

    A patch store needs the stub's displacement address as an immediate;
    scan the measured byte span for it.
    """
    code = ctypes.string_at(kernel.addr, kernel.code_len)
    needle = struct.pack("<Q", stub_entry + 1)
    for start, end in kernel.measured_spans:
        if needle in code[start:end]:
            raise AssertionError("measured region contains a patch store")


# -- emit helpers ---------------------------------------------------------------


def emit_load_cond(a: Asm, cond_buf: int, dst=RCX, size=1):
    """dst = conditions[i] (byte array baked at cond_buf)."""
    a.mov_ri(R10, cond_buf)
    a.load_sib(dst, R10, RBX, 1, size)


_SYS_MPROTECT = 10
_PROT_RX = 0x5
_PROT_RWX = 0x7


def emit_set_direction(a: Asm, branch_state: "BranchState", cond=RCX, guarded=True,
                       safe=False):
    """Inline direction store: offsets[cond] -> stub+1, with redundancy guard.

    With `safe`, the stub page is made writable only around the store (two
    mprotect syscalls). The syscalls clobber rax/rcx/r11 and take rdi/rsi/
    rdx, so the condition is staged in r9 for the duration.
    """
    skip = a.label()
    if guarded:
        a.mov_ri(R10, branch_state.cur_addr)
        a.load(RAX, R10, 0, 8)
        a.cmp_rr(RAX, cond)
        a.jcc("e", skip)
    if safe:
        a.mov_rr(R9, cond)
        _emit_mprotect(a, branch_state, _PROT_RWX)
        cond = R9
    a.mov_ri(R10, branch_state.table_addr)
    a.load_sib(RAX, R10, cond, 4, 4)
    a.mov_ri(R10, branch_state.stub_entry + 1)
    a.store(R10, 0, RAX, 4)
    if safe:
        _emit_mprotect(a, branch_state, _PROT_RX)
        cond = R9
    if guarded:
        a.mov_ri(R10, branch_state.cur_addr)
        a.store(R10, 0, cond, 8)
        a.bind(skip)


def _emit_mprotect(a: Asm, branch_state: "BranchState", prot: int):
    from ..codepatch import region_for
    region = region_for(branch_state.stub_entry, 5)
    a.mov_ri(RAX, _SYS_MPROTECT)
    a.mov_ri(RDI, region.base)
    a.mov_ri(RSI, region.length)
    a.mov_ri(RDX, prot)
    a.syscall()


def emit_smc_buffer(a: Asm, stub_entry: int, flush=True, work=128):
    """Temporal barrier: optional stub-line flush plus dependent adds."""
    if flush:
        a.mov_ri(R10, stub_entry)
        a.clflush(R10, 0)
    a.xor_rr(RAX, RAX)
    for _ in range(work):
        a.add_ri(RAX, 1)


def emit_message_gen(a: Asm, msg_addr: int):
    """Regenerate the 64-byte message, one xorshift64 round per qword.

    Each qword also feeds a data-dependent branch, so the message loop
    pollutes global branch history the way real pre-hot-path logic does
    (the filler must not let the predictor key on loop position alone).
    State lives in rbp; seed it in the kernel's setup hook.
    """
    a.mov_ri(R10, msg_addr)
    for off in range(0, 64, 8):
        a.mov_rr(RAX, RBP)
        a.shl_ri(RAX, 13)
        a.xor_rr(RBP, RAX)
        a.mov_rr(RAX, RBP)
        a.shr_ri(RAX, 7)
        a.xor_rr(RBP, RAX)
        a.mov_rr(RAX, RBP)
        a.shl_ri(RAX, 17)
        a.xor_rr(RBP, RAX)
        a.store(R10, off, RBP, 8)
        skip = a.label()
        a.mov_rr(RAX, RBP)
        a.and_ri(RAX, 1 << (off // 8))
        a.jcc("e", skip)
        a.add_ri(RDX, 1)
        a.bind(skip)


def emit_mac_chain(a: Asm, macs: int):
    """Dependent multiply-accumulate chain: pricing-like arithmetic whose
    latency keeps the front-end far ahead of retirement."""
    a.mov_rr(RAX, RBP)
    a.mov_rr(RDX, RBP)
    a.raw(bytes([0x48, 0x83, 0xCA, 0x01]))  # or rdx, 1
    for _ in range(macs // 2):
        a.imul_rr(RAX, RDX)
        a.add_ri(RAX, 3)


def emit_filler(a: Asm, msg_addr: int, macs: int):
    """Unmeasured per-iteration work emulating hot-path infrequency:
    message generation plus a multiply-accumulate chain."""
    emit_message_gen(a, msg_addr)
    emit_mac_chain(a, macs)


def emit_touch(a: Asm, *addrs: int):
    """Data-cache warming: load each address's line."""
    for addr in addrs:
        a.mov_ri(R10, addr)
        a.load(RAX, R10, 0, 8)


class BranchState:
    """Addresses a kernel needs to drive one branch: stub, offsets, current."""

    def __init__(self, branch: SemiStaticBranch, state_buf: "Buffers"):
        self.stub_entry = branch.entry_address
        offs = branch.offset_table_u32()
        self.table = (ctypes.c_uint32 * len(offs))(*offs)
        self.table_addr = ctypes.addressof(self.table)
        self.cur = ctypes.c_uint64(branch.direction)
        self.cur_addr = ctypes.addressof(self.cur)
        state_buf.keep(self.table, self.cur)
        self.mutex_addr = None
        self.pthread_lock = None
        self.pthread_unlock = None

    def attach_mutex(self, state_buf: "Buffers"):
        """Zero-initialized pthread mutex (or bare spinlock word)."""
        self.mutex_addr = state_buf.bytes_buffer(64)
        fns = mutex_functions()
        if fns:
            self.pthread_lock, self.pthread_unlock = fns
        return "pthread" if fns else "spin"


class Buffers:
    """Owns ctypes storage referenced by baked-in addresses."""

    def __init__(self):
        self._keep = []

    def keep(self, *objs):
        self._keep.extend(objs)
        return objs[-1] if len(objs) == 1 else objs

    def bytes_buffer(self, size: int, align: int = 64) -> int:
        raw = ctypes.create_string_buffer(size + align)
        self.keep(raw)
        addr = ctypes.addressof(raw)
        return -(-addr // align) * align

    def u8_array(self, values: np.ndarray) -> int:
        arr = np.ascontiguousarray(values, dtype=np.uint8)
        self.keep(arr)
        return arr.ctypes.data

    def u64_array(self, count: int):
        arr = (ctypes.c_uint64 * count)()
        self.keep(arr)
        return arr, ctypes.addressof(arr)


# -- threading support (scenario S9) ---------------------------------------------


def mutex_functions():
    """(lock_addr, unlock_addr) for pthread mutexes, or None if unresolvable."""
    try:
        libc = ctypes.CDLL(None)
        lock = ctypes.cast(libc.pthread_mutex_lock, ctypes.c_void_p).value
        unlock = ctypes.cast(libc.pthread_mutex_unlock, ctypes.c_void_p).value
        return lock, unlock
    except (OSError, AttributeError):
        return None


def emit_spin_lock(a: Asm, mutex_addr: int):
    a.mov_ri(R10, mutex_addr)
    retry = a.bind(a.label())
    a.mov_ri(RAX, 1)
    a.xchg_mem_r(R10, 0, RAX)  # implicitly locked
    got = a.label()
    a.test_rr(RAX, RAX)
    a.jcc("e", got)
    a.pause()
    a.jmp(retry)
    a.bind(got)


def emit_spin_unlock(a: Asm, mutex_addr: int):
    a.xor_rr(RAX, RAX)
    a.mov_ri(R10, mutex_addr)
    a.store(R10, 0, RAX, 8)


def emit_pthread_call(a: Asm, fn_addr: int, mutex_addr: int):
    a.mov_ri(RDI, mutex_addr)
    a.mov_ri(RAX, fn_addr)
    a.call_reg(RAX)


def build_worker(rt: Runtime, cond_addr: int, stop_addr: int, spin: int,
                 branch_state: "BranchState | None" = None,
                 lock=None) -> "tuple[int, object]":
    """Worker loop: every ~`spin` pause iterations, flip the shared condition
    (and, when driving a branch, patch its direction, optionally locked).
    Returns (addr, callable); the callable returns the number of flips."""
    a = Asm()
    a.push(RBX)
    a.push(RBP)
    a.xor_rr(RBX, RBX)  # flips
    top = a.bind(a.label())
    a.mov_ri(RCX, spin)
    wait = a.bind(a.label())
    a.pause()
    a.dec(RCX)
    a.jcc("ne", wait)
    out = a.label()
    a.mov_ri(R10, stop_addr)
    a.load(RAX, R10, 0, 1)
    a.test_rr(RAX, RAX)
    a.jcc("ne", out)
    # The lock covers both the condition flip and the patch, so a reader
    # holding the lock always sees them consistent.
    if lock == "spin":
        emit_spin_lock(a, branch_state.mutex_addr)
    elif lock == "pthread":
        emit_pthread_call(a, branch_state.pthread_lock, branch_state.mutex_addr)
    a.mov_ri(R10, cond_addr)
    a.load(RBP, R10, 0, 1)
    a.raw(bytes([0x48, 0x83, 0xF5, 0x01]))  # xor rbp, 1
    a.store(R10, 0, RBP, 1)
    a.inc(RBX)
    if branch_state is not None:
        emit_set_direction(a, branch_state, cond=RBP, guarded=False)
    if lock == "spin":
        emit_spin_unlock(a, branch_state.mutex_addr)
    elif lock == "pthread":
        emit_pthread_call(a, branch_state.pthread_unlock, branch_state.mutex_addr)
    a.jmp(top)
    a.bind(out)
    a.mov_rr(RAX, RBX)
    a.pop(RBP)
    a.pop(RBX)
    a.ret()
    addr = rt.place(a, align=64)
    return addr, ctypes.CFUNCTYPE(ctypes.c_uint64)(addr)
