"""Emitter encodings against reference bytes, and execution round trips.

Expected byte sequences were produced with GNU as (Intel syntax) and frozen
here; a live cross-check against binutils runs when `as` is available.
"""

import ctypes
import shutil
import struct
import subprocess
import tempfile
import os

import pytest

from semistatic._asm import (
    Asm, RAX, RBX, RCX, RDX, RSP, RBP, RSI, RDI, R8, R9, R10, R11, R12, R13, R15,
)

CASES = [
    ("mov_ri small", lambda a: a.mov_ri(RAX, 42), "b82a000000"),
    ("mov_ri r13", lambda a: a.mov_ri(R13, 42), "41bd2a000000"),
    ("mov_ri imm64", lambda a: a.mov_ri(RBX, 0x123456789A), "48bb9a78563412000000"),
    ("mov_rr", lambda a: a.mov_rr(RSP, R9), "4c89cc"),
    ("store8", lambda a: a.store(RBX, 8, RCX, 8), "48894b08"),
    ("store8 rsp", lambda a: a.store(RSP, 0, RCX, 8), "48890c24"),
    ("store8 rbp", lambda a: a.store(RBP, 0, RCX, 8), "48894d00"),
    ("store8 r13 disp32", lambda a: a.store(R13, 4096, RCX, 8), "49898d00100000"),
    ("store4", lambda a: a.store(RSI, -8, R10, 4), "448956f8"),
    ("store1 dil", lambda a: a.store(RAX, 3, RDI, 1), "40887803"),
    ("store1 cl", lambda a: a.store(RAX, 3, RCX, 1), "884803"),
    ("load8", lambda a: a.load(RDX, R12, 127, 8), "498b54247f"),
    ("load4", lambda a: a.load(RDX, RAX, 0, 4), "8b10"),
    ("load1 movzx", lambda a: a.load(R9, RBP, 0, 1), "440fb64d00"),
    ("store_sib", lambda a: a.store_sib(R13, RBX, 8, RAX, 8), "498944dd00"),
    ("load_sib", lambda a: a.load_sib(RAX, RSI, RCX, 8, 8), "488b04ce"),
    ("load_sib1", lambda a: a.load_sib(RDX, RBP, RBX, 1, 1), "0fb6541d00"),
    ("jmp_sib", lambda a: a.jmp_sib(RBX, RCX, 8), "ff24cb"),
    ("lea", lambda a: a.lea(RAX, RBP, -16), "488d45f0"),
    ("add_rr", lambda a: a.add_rr(RAX, RBX), "4801d8"),
    ("sub_rr", lambda a: a.sub_rr(R15, RAX), "4929c7"),
    ("xor_rr", lambda a: a.xor_rr(RBX, RBX), "4831db"),
    ("cmp_rr", lambda a: a.cmp_rr(RBX, R12), "4c39e3"),
    ("test_rr", lambda a: a.test_rr(RAX, RAX), "4885c0"),
    ("add_ri8", lambda a: a.add_ri(RSP, 8), "4883c408"),
    ("add_ri32", lambda a: a.add_ri(RSP, 1024), "4881c400040000"),
    ("cmp_ri", lambda a: a.cmp_ri(RBX, 5), "4883fb05"),
    ("and_ri", lambda a: a.and_ri(RCX, 0xFF), "4881e1ff000000"),
    ("imul", lambda a: a.imul_rr(RAX, R10), "490fafc2"),
    ("inc", lambda a: a.inc(RBX), "48ffc3"),
    ("dec", lambda a: a.dec(R15), "49ffcf"),
    ("inc_mem", lambda a: a.inc_mem(RBX, 16), "48ff4310"),
    ("shl", lambda a: a.shl_ri(RDX, 32), "48c1e220"),
    ("shr", lambda a: a.shr_ri(RAX, 5), "48c1e805"),
    ("cmp_mem8", lambda a: a.cmp_mem8_imm(RDI, 3, 1), "807f0301"),
    ("push", lambda a: a.push(R12), "4154"),
    ("pop", lambda a: a.pop(RBX), "5b"),
    ("ret", lambda a: a.ret(), "c3"),
    ("rdtsc", lambda a: a.rdtsc(), "0f31"),
    ("lfence", lambda a: a.lfence(), "0faee8"),
    ("mfence", lambda a: a.mfence(), "0faef0"),
    ("pause", lambda a: a.pause(), "f390"),
    ("syscall", lambda a: a.syscall(), "0f05"),
    ("clflush", lambda a: a.clflush(RDI, 0), "0fae3f"),
    ("clflush disp", lambda a: a.clflush(R8, 64), "410fae7840"),
    ("call_reg", lambda a: a.call_reg(R11), "41ffd3"),
    ("xchg", lambda a: a.xchg_mem_r(RBX, 0, RAX), "488703"),
]


@pytest.mark.parametrize("name,emit,expected", CASES, ids=[c[0] for c in CASES])
def test_encoding(name, emit, expected):
    a = Asm()
    emit(a)
    assert a.code().hex() == expected


def test_label_backward_and_forward():
    a = Asm()
    a.xor_rr(RBX, RBX)
    top = a.bind(a.label())
    a.inc(RBX)
    a.cmp_ri(RBX, 10)
    a.jcc("b", top)
    fwd = a.label()
    a.jmp(fwd)
    a.nop(2)
    a.bind(fwd)
    a.ret()
    code = a.code()
    # jb rel32 back to `top` (offset 3), jmp rel32 over two nops
    assert code.hex() == "4831db48ffc34883fb0a0f82f3ffffffe9020000009090c3"


def test_unbound_label_rejected():
    a = Asm()
    a.jmp(a.label())
    with pytest.raises(ValueError):
        a.code()


def test_abs_fixup_depends_on_placement():
    a = Asm()
    a.call_abs(0x5000)
    code0 = a.code(at=0x1000)
    code1 = a.code(at=0x2000)
    assert struct.unpack("<i", code0[1:5])[0] == 0x5000 - 0x1005
    assert struct.unpack("<i", code1[1:5])[0] == 0x5000 - 0x2005


def test_abs_fixup_range_checked():
    a = Asm()
    a.jmp_abs(1 << 40)
    with pytest.raises(ValueError):
        a.code(at=0)


@pytest.mark.skipif(shutil.which("as") is None, reason="binutils not available")
def test_cross_check_against_gas():
    text = "\n".join([
        "mov eax, 42", "mov rbx, r9", "mov QWORD PTR [r13+8], rcx",
        "movzx edx, BYTE PTR [rsi]", "lea rax, [rsp+24]", "imul rax, rdx",
        "cmp rbx, 100000", "shl rdx, 32", "clflush [rdi]", "xchg QWORD PTR [rbx], rax",
    ])
    a = Asm()
    a.mov_ri(RAX, 42)
    a.mov_rr(RBX, R9)
    a.store(R13, 8, RCX, 8)
    a.load(RDX, RSI, 0, 1)
    a.lea(RAX, RSP, 24)
    a.imul_rr(RAX, RDX)
    a.cmp_ri(RBX, 100000)
    a.shl_ri(RDX, 32)
    a.clflush(RDI, 0)
    a.xchg_mem_r(RBX, 0, RAX)
    with tempfile.TemporaryDirectory() as d:
        src = os.path.join(d, "t.s")
        obj = os.path.join(d, "t.o")
        binf = os.path.join(d, "t.bin")
        with open(src, "w") as f:
            f.write(".intel_syntax noprefix\n.text\n" + text + "\n")
        subprocess.run(["as", "-o", obj, src], check=True)
        subprocess.run(["objcopy", "-O", "binary", "--only-section=.text",
                        obj, binf], check=True)
        with open(binf, "rb") as f:
            assert a.code() == f.read()


def test_executes_arithmetic(rt):
    a = Asm()
    a.mov_rr(RAX, RDI)
    a.imul_rr(RAX, RSI)
    a.add_ri(RAX, 7)
    a.ret()
    addr = rt.place(a)
    fn = ctypes.CFUNCTYPE(ctypes.c_int64, ctypes.c_int64, ctypes.c_int64)(addr)
    assert fn(6, 7) == 49
    assert fn(-3, 5) == -8


def test_executes_loop_with_memory(rt):
    # sum buf[0..n) into rax
    a = Asm()
    a.xor_rr(RAX, RAX)
    a.xor_rr(RCX, RCX)
    done = a.label()
    a.test_rr(RSI, RSI)
    a.jcc("e", done)
    top = a.bind(a.label())
    a.load_sib(RDX, RDI, RCX, 8, 8)
    a.add_rr(RAX, RDX)
    a.inc(RCX)
    a.cmp_rr(RCX, RSI)
    a.jcc("b", top)
    a.bind(done)
    a.ret()
    addr = rt.place(a)
    fn = ctypes.CFUNCTYPE(ctypes.c_uint64, ctypes.c_void_p, ctypes.c_uint64)(addr)
    buf = (ctypes.c_uint64 * 5)(1, 2, 3, 4, 5)
    assert fn(ctypes.addressof(buf), 5) == 15
    assert fn(ctypes.addressof(buf), 0) == 0
