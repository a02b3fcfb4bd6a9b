"""Minimal x86-64 instruction emitter.

Emits the small instruction vocabulary needed by this package: entry stubs,
branch targets, and benchmark measurement loops. System V AMD64 conventions
throughout. Not a general assembler; every encoding here is exercised by the
unit tests against byte sequences produced by a reference assembler.

Position-dependent references (call/jmp to absolute addresses outside the
buffer) are recorded as fixups and resolved when the code is placed at its
final address.
"""

from __future__ import annotations

import struct

# Register numbers. Bits 0-2 go in modrm/SIB, bit 3 into the REX prefix.
RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)
R8, R9, R10, R11, R12, R13, R14, R15 = range(8, 16)

# Condition codes for jcc (0F 8x).
CC = {
    "o": 0x0, "no": 0x1, "b": 0x2, "ae": 0x3, "e": 0x4, "ne": 0x5,
    "be": 0x6, "a": 0x7, "s": 0x8, "ns": 0x9, "l": 0xC, "ge": 0xD,
    "le": 0xE, "g": 0xF,
}


class Label:
    __slots__ = ("pos",)

    def __init__(self):
        self.pos = None  # offset within the buffer once bound


class Asm:
    """Append-only code buffer with label and absolute-target fixups."""

    def __init__(self):
        self.buf = bytearray()
        self._label_fixups = []  # (patch_offset, label)  rel32 from end of field
        self.abs_fixups = []     # (patch_offset, target_address)

    # -- buffer primitives -------------------------------------------------

    def _emit(self, *bs: int):
        self.buf.extend(bs)

    def _emit_bytes(self, bs: bytes):
        self.buf.extend(bs)

    def _imm32(self, value: int):
        self.buf.extend(struct.pack("<i", value))

    def _imm64(self, value: int):
        self.buf.extend(struct.pack("<q", value if value < 1 << 63 else value - (1 << 64)))

    def raw(self, bs: bytes):
        self.buf.extend(bs)

    def label(self) -> Label:
        return Label()

    def bind(self, lbl: Label) -> Label:
        lbl.pos = len(self.buf)
        return lbl

    def here(self) -> int:
        return len(self.buf)

    # -- encoding helpers --------------------------------------------------

    def _rex(self, w: int, reg: int, rm: int, index: int = 0, force: bool = False):
        rex = 0x40 | (w << 3) | ((reg >> 3) << 2) | ((index >> 3) << 1) | (rm >> 3)
        if rex != 0x40 or force:
            self._emit(rex)

    def _modrm_mem(self, reg_field: int, base: int, disp: int):
        """modrm (+SIB, +disp) for [base + disp]; no index register."""
        reg_field &= 7
        base_low = base & 7
        need_sib = base_low == 4                      # rsp/r12 always need SIB
        if disp == 0 and base_low != 5:               # rbp/r13 cannot use mod 00
            mod = 0
        elif -128 <= disp <= 127:
            mod = 1
        else:
            mod = 2
        self._emit((mod << 6) | (reg_field << 3) | (4 if need_sib else base_low))
        if need_sib:
            self._emit(0x24)                          # scale=0, index=none, base
        if mod == 1:
            self._emit(disp & 0xFF)
        elif mod == 2:
            self._imm32(disp)

    def _modrm_reg(self, reg_field: int, rm: int):
        self._emit(0xC0 | ((reg_field & 7) << 3) | (rm & 7))

    # -- moves ---------------------------------------------------------------

    def mov_ri(self, dst: int, imm: int):
        """mov dst, imm — 32-bit zero-extending form when imm fits."""
        if 0 <= imm < 1 << 32:
            self._rex(0, 0, dst)
            self._emit(0xB8 | (dst & 7))
            self.buf.extend(struct.pack("<I", imm))
        else:
            self._rex(1, 0, dst)
            self._emit(0xB8 | (dst & 7))
            self._imm64(imm)

    def mov_rr(self, dst: int, src: int):
        self._rex(1, src, dst)
        self._emit(0x89)
        self._modrm_reg(src, dst)

    def store(self, base: int, disp: int, src: int, size: int = 8):
        """mov [base+disp], src (size in {1,4,8})."""
        if size == 8:
            self._rex(1, src, base)
            self._emit(0x89)
        elif size == 4:
            self._rex(0, src, base)
            self._emit(0x89)
        elif size == 1:
            # SPL/BPL/SIL/DIL require an empty REX prefix
            self._rex(0, src, base, force=src in (RSP, RBP, RSI, RDI))
            self._emit(0x88)
        else:
            raise ValueError(f"unsupported store size {size}")
        self._modrm_mem(src, base, disp)

    def load(self, dst: int, base: int, disp: int, size: int = 8):
        """mov dst, [base+disp]; byte loads zero-extend (movzx)."""
        if size == 8:
            self._rex(1, dst, base)
            self._emit(0x8B)
        elif size == 4:
            self._rex(0, dst, base)
            self._emit(0x8B)
        elif size == 1:
            self._rex(0, dst, base)
            self._emit(0x0F, 0xB6)
        else:
            raise ValueError(f"unsupported load size {size}")
        self._modrm_mem(dst, base, disp)

    def store_sib(self, base: int, index: int, scale: int, src: int, size: int = 8):
        """mov [base + index*scale], src."""
        if size == 8:
            self._rex(1, src, base, index)
            self._emit(0x89)
        elif size == 4:
            self._rex(0, src, base, index)
            self._emit(0x89)
        else:
            raise ValueError(f"unsupported store size {size}")
        self._sib_operand(src, base, index, scale)

    def load_sib(self, dst: int, base: int, index: int, scale: int, size: int = 8):
        """mov dst, [base + index*scale]; byte loads zero-extend."""
        if size == 8:
            self._rex(1, dst, base, index)
            self._emit(0x8B)
        elif size == 4:
            self._rex(0, dst, base, index)
            self._emit(0x8B)
        elif size == 1:
            self._rex(0, dst, base, index)
            self._emit(0x0F, 0xB6)
        else:
            raise ValueError(f"unsupported load size {size}")
        self._sib_operand(dst, base, index, scale)

    def _sib_operand(self, reg_field: int, base: int, index: int, scale: int):
        if index == RSP:
            raise ValueError("rsp cannot be an index register")
        ss = {1: 0, 2: 1, 4: 2, 8: 3}[scale]
        base_low = base & 7
        mod = 1 if base_low == 5 else 0               # rbp/r13 base needs disp8
        self._emit((mod << 6) | ((reg_field & 7) << 3) | 4)
        self._emit((ss << 6) | ((index & 7) << 3) | base_low)
        if mod == 1:
            self._emit(0x00)

    def lea(self, dst: int, base: int, disp: int):
        self._rex(1, dst, base)
        self._emit(0x8D)
        self._modrm_mem(dst, base, disp)

    # -- arithmetic / logic --------------------------------------------------

    def _alu_rr(self, opcode: int, dst: int, src: int):
        self._rex(1, src, dst)
        self._emit(opcode)
        self._modrm_reg(src, dst)

    def add_rr(self, dst, src): self._alu_rr(0x01, dst, src)
    def sub_rr(self, dst, src): self._alu_rr(0x29, dst, src)
    def xor_rr(self, dst, src): self._alu_rr(0x31, dst, src)
    def or_rr(self, dst, src): self._alu_rr(0x09, dst, src)
    def and_rr(self, dst, src): self._alu_rr(0x21, dst, src)
    def cmp_rr(self, dst, src): self._alu_rr(0x39, dst, src)
    def test_rr(self, dst, src): self._alu_rr(0x85, dst, src)

    def _alu_ri(self, ext: int, dst: int, imm: int):
        self._rex(1, 0, dst)
        if -128 <= imm <= 127:
            self._emit(0x83)
            self._modrm_reg(ext, dst)
            self._emit(imm & 0xFF)
        else:
            self._emit(0x81)
            self._modrm_reg(ext, dst)
            self._imm32(imm)

    def add_ri(self, dst, imm): self._alu_ri(0, dst, imm)
    def sub_ri(self, dst, imm): self._alu_ri(5, dst, imm)
    def and_ri(self, dst, imm): self._alu_ri(4, dst, imm)
    def cmp_ri(self, dst, imm): self._alu_ri(7, dst, imm)

    def imul_rr(self, dst: int, src: int):
        self._rex(1, dst, src)
        self._emit(0x0F, 0xAF)
        self._modrm_reg(dst, src)

    def inc(self, r: int):
        self._rex(1, 0, r)
        self._emit(0xFF)
        self._modrm_reg(0, r)

    def dec(self, r: int):
        self._rex(1, 0, r)
        self._emit(0xFF)
        self._modrm_reg(1, r)

    def inc_mem(self, base: int, disp: int):
        """inc qword [base+disp]."""
        self._rex(1, 0, base)
        self._emit(0xFF)
        self._modrm_mem(0, base, disp)

    def shl_ri(self, r: int, imm: int):
        self._rex(1, 0, r)
        self._emit(0xC1)
        self._modrm_reg(4, r)
        self._emit(imm)

    def shr_ri(self, r: int, imm: int):
        self._rex(1, 0, r)
        self._emit(0xC1)
        self._modrm_reg(5, r)
        self._emit(imm)

    def cmp_mem8_imm(self, base: int, disp: int, imm: int):
        """cmp byte [base+disp], imm8."""
        self._rex(0, 0, base)
        self._emit(0x80)
        self._modrm_mem(7, base, disp)
        self._emit(imm & 0xFF)

    # -- stack / calls / branches ---------------------------------------------

    def push(self, r: int):
        self._rex(0, 0, r)
        self._emit(0x50 | (r & 7))

    def pop(self, r: int):
        self._rex(0, 0, r)
        self._emit(0x58 | (r & 7))

    def ret(self):
        self._emit(0xC3)

    def nop(self, count: int = 1):
        for _ in range(count):
            self._emit(0x90)

    def int3(self):
        self._emit(0xCC)

    def pause(self):
        self._emit(0xF3, 0x90)

    def syscall(self):
        """Clobbers rax, rcx, r11 (Linux syscall ABI)."""
        self._emit(0x0F, 0x05)

    def jmp(self, lbl: Label):
        self._emit(0xE9)
        self._label_ref(lbl)

    def jcc(self, cond: str, lbl: Label):
        self._emit(0x0F, 0x80 | CC[cond])
        self._label_ref(lbl)

    def call_label(self, lbl: Label):
        self._emit(0xE8)
        self._label_ref(lbl)

    def call_abs(self, target: int):
        """call rel32 to an absolute address; resolved at placement."""
        self._emit(0xE8)
        self.abs_fixups.append((len(self.buf), target))
        self._imm32(0)

    def jmp_abs(self, target: int):
        self._emit(0xE9)
        self.abs_fixups.append((len(self.buf), target))
        self._imm32(0)

    def call_reg(self, r: int):
        self._rex(0, 0, r)
        self._emit(0xFF)
        self._modrm_reg(2, r)

    def jmp_sib(self, base: int, index: int, scale: int):
        """jmp qword [base + index*scale] (jump-table dispatch)."""
        self._rex(0, 0, base, index)
        self._emit(0xFF)
        self._sib_operand(4, base, index, scale)

    def _label_ref(self, lbl: Label):
        self._label_fixups.append((len(self.buf), lbl))
        self._imm32(0)

    # -- timing / cache ---------------------------------------------------------

    def rdtsc(self):
        self._emit(0x0F, 0x31)

    def lfence(self):
        self._emit(0x0F, 0xAE, 0xE8)

    def mfence(self):
        self._emit(0x0F, 0xAE, 0xF0)

    def clflush(self, base: int, disp: int = 0):
        self._rex(0, 0, base)
        self._emit(0x0F, 0xAE)
        self._modrm_mem(7, base, disp)

    def serialized_tsc(self, scratch_hi: int = RDX):
        """lfence; rdtsc; lfence; fold edx:eax into rax.

        Both timestamp reads in a measurement must use this sequence so the
        measured code cannot be reordered across either read.
        """
        self.lfence()
        self.rdtsc()
        self.lfence()
        self.shl_ri(scratch_hi, 32)
        self.or_rr(RAX, scratch_hi)

    def xchg_mem_r(self, base: int, disp: int, r: int):
        """xchg [base+disp], r64 — implicitly locked."""
        self._rex(1, r, base)
        self._emit(0x87)
        self._modrm_mem(r, base, disp)

    # -- finalization ---------------------------------------------------------

    def code(self, at: int = 0) -> bytes:
        """Resolve fixups as if the buffer were placed at address `at`."""
        out = bytearray(self.buf)
        for pos, lbl in self._label_fixups:
            if lbl.pos is None:
                raise ValueError("unbound label")
            struct.pack_into("<i", out, pos, lbl.pos - (pos + 4))
        for pos, target in self.abs_fixups:
            rel = target - (at + pos + 4)
            if not -(1 << 31) <= rel < (1 << 31):
                raise ValueError(f"absolute fixup out of rel32 range: {rel:#x}")
            struct.pack_into("<i", out, pos, rel)
        return bytes(out)

    def __len__(self):
        return len(self.buf)
