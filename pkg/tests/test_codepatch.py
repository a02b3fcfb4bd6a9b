"""Page arithmetic, rel32 encoding, protection changes, and patch stores."""

import ctypes
import struct
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from semistatic import targets
from semistatic.codepatch import (
    JMP_REL32_LEN, PageRegion, ProtectionMode, Rel32Patch, encode_rel32,
    jump_target, page_base, read_jump, region_for, write_jump,
)
from semistatic.errors import DisplacementOutOfRange, PlatformError
from semistatic.memory import PAGE_SIZE, region_protection
from semistatic.targets import SIG_I64_BINOP


class TestPageBase:
    def test_aligned(self):
        assert page_base(0x2000, 4096) == 0x2000

    def test_one_past(self):
        assert page_base(0x2001, 4096) == 0x2000

    def test_mid_page(self):
        # addr - (addr mod page_size): 0x11e7 - 0x1e7
        assert page_base(0x11E7, 4096) == 0x1000

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            page_base(0x1000, 3000)

    @given(st.integers(min_value=0, max_value=(1 << 64) - 1),
           st.integers(min_value=0, max_value=20))
    def test_bracketing(self, addr, shift):
        p = 1 << shift
        b = page_base(addr, p)
        assert b % p == 0
        assert b <= addr < b + p


class TestRegionFor:
    def test_single_page(self):
        r = region_for(0x1000, 5, 4096)
        assert (r.base, r.length) == (0x1000, 4096)

    def test_straddles_boundary(self):
        # a 5-byte patch starting 2 bytes before a page boundary
        r = region_for(0x1FFE, 5, 4096)
        assert (r.base, r.length) == (0x1000, 8192)

    def test_region_invariants(self):
        with pytest.raises(ValueError):
            PageRegion(0x1001, 4096)
        with pytest.raises(ValueError):
            PageRegion(0x1000, 0)


class TestEncodeRel32:
    def test_worked_example_backward_call(self):
        # call at 0x11e7 reaching 0x11a9: displacement -67
        patch = encode_rel32(0x11E7, 0x11A9, 5)
        assert patch.data == bytes.fromhex("bdffffff")
        assert patch.displacement == -67

    def test_zero_displacement(self):
        e = 0x400000
        assert encode_rel32(e, e + 5, 5).data == b"\x00\x00\x00\x00"

    def test_positive_displacement_bytes(self):
        e = 0x400000
        assert encode_rel32(e, e + 5 + 0x1234, 5).data == b"\x34\x12\x00\x00"

    def test_out_of_range(self):
        with pytest.raises(DisplacementOutOfRange):
            encode_rel32(0, (1 << 34), 5)
        with pytest.raises(DisplacementOutOfRange):
            encode_rel32((1 << 34), 0, 5)

    def test_boundary_values(self):
        e = 1 << 40
        encode_rel32(e, e + 5 + (1 << 31) - 1)    # max forward
        encode_rel32(e, e + 5 - (1 << 31))        # max backward
        with pytest.raises(DisplacementOutOfRange):
            encode_rel32(e, e + 5 + (1 << 31))

    @given(st.integers(min_value=5, max_value=(1 << 48)),
           st.integers(min_value=-(1 << 31) + 1, max_value=(1 << 31) - 1))
    @settings(max_examples=300)
    def test_round_trip(self, entry, disp):
        target = entry + 5 + disp
        if target < 0:
            return
        patch = encode_rel32(entry, target)
        # independent byte-decomposition oracle
        expected = struct.pack("<i", disp)
        assert patch.data == expected
        assert jump_target(entry, patch) == target

    def test_patch_must_be_four_bytes(self):
        with pytest.raises(ValueError):
            Rel32Patch(b"\x00\x00\x00")


class TestWriteJump:
    def test_arm_writes_opcode_and_offset(self, rt):
        tgt = targets.const_i64(rt, 99)
        entry = rt.arena.reserve(16, align=16)
        patch = encode_rel32(entry, tgt)
        write_jump(entry, patch, arm=True, arena=rt.arena)
        opcode, stored = read_jump(entry)
        assert opcode == 0xE9
        assert stored.data == patch.data
        fn = ctypes.CFUNCTYPE(ctypes.c_int64)(entry)
        assert fn() == 99

    def test_idempotent(self, rt):
        tgt = targets.const_i64(rt, 1)
        entry = rt.arena.reserve(16, align=16)
        patch = encode_rel32(entry, tgt)
        write_jump(entry, patch, arm=True, arena=rt.arena)
        before = ctypes.string_at(entry, 5)
        write_jump(entry, patch, arm=True, arena=rt.arena)
        assert ctypes.string_at(entry, 5) == before

    def test_dispatch_matches_direct_call(self, rt):
        add = targets.add_i64(rt)
        sub = targets.sub_i64(rt)
        entry = rt.arena.reserve(16, align=16)
        write_jump(entry, encode_rel32(entry, add), arm=True, arena=rt.arena)
        fn = SIG_I64_BINOP.bind(entry)
        direct = SIG_I64_BINOP.bind(add)
        assert fn(5, 3) == direct(5, 3) == 8
        write_jump(entry, encode_rel32(entry, sub), arm=False, arena=rt.arena)
        assert fn(5, 3) == 2

    def test_unwritable_page_rejected_before_store(self, rt):
        tgt = targets.const_i64(rt, 7)
        entry = rt.arena.reserve_pages(1)
        patch = encode_rel32(entry, tgt)
        write_jump(entry, patch, arm=True, arena=rt.arena)
        rt.arena.protect(entry, PAGE_SIZE, 0x5)  # read|exec
        before = ctypes.string_at(entry, 5)
        other = encode_rel32(entry, targets.const_i64(rt, 8))
        with pytest.raises(PlatformError):
            write_jump(entry, other, arm=False, arena=rt.arena)
        assert ctypes.string_at(entry, 5) == before
        rt.arena.protect(entry, PAGE_SIZE, 0x7)


class TestProtection:
    def test_toggle_and_dispatch(self, rt):
        tgt = targets.const_i64(rt, 123)
        entry = rt.arena.reserve_pages(1)
        write_jump(entry, encode_rel32(entry, tgt), arm=True, arena=rt.arena)
        region = region_for(entry, JMP_REL32_LEN)
        from semistatic.codepatch import set_region_protection
        set_region_protection(region, ProtectionMode.READ_EXEC, rt.arena)
        assert "w" not in region_protection(entry)
        fn = ctypes.CFUNCTYPE(ctypes.c_int64)(entry)
        assert fn() == 123  # still executable, dispatch unchanged
        set_region_protection(region, ProtectionMode.READ_WRITE_EXEC, rt.arena)
        assert "w" in region_protection(entry)

    def test_unmapped_region_fails_with_os_error(self):
        # probe a deliberately invalid address in a child process
        code = (
            "from semistatic.codepatch import set_region_protection, PageRegion, ProtectionMode\n"
            "from semistatic.errors import PlatformError\n"
            "try:\n"
            "    set_region_protection(PageRegion(0x10000, 4096), ProtectionMode.READ_WRITE_EXEC)\n"
            "except PlatformError as e:\n"
            "    assert e.errno != 0\n"
            "    print('PLATFORM_ERROR', e.errno)\n"
        )
        out = subprocess.run([sys.executable, "-c", code],
                             capture_output=True, text=True)
        assert "PLATFORM_ERROR" in out.stdout, out.stderr


class TestFlush:
    def test_flush_is_semantically_invisible(self, rt):
        from semistatic.codepatch import flush_code_line
        tgt = targets.const_i64(rt, 55)
        entry = rt.arena.reserve(16, align=16)
        write_jump(entry, encode_rel32(entry, tgt), arm=True, arena=rt.arena)
        fn = ctypes.CFUNCTYPE(ctypes.c_int64)(entry)
        assert fn() == 55
        flush_code_line(entry, rt.arena)
        assert fn() == 55

    def test_flush_of_data_address(self, rt):
        from semistatic.codepatch import flush_code_line
        buf = ctypes.c_uint64(0xDEADBEEF)
        flush_code_line(ctypes.addressof(buf), rt.arena)
        assert buf.value == 0xDEADBEEF
