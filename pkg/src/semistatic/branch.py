"""Semi-static branches: patchable unconditional jumps with a stable entry point.

A branch binds one entry stub (a fixed-address callable whose first and only
live instruction is a 5-byte relative jump) to N targets. Selecting a
direction rewrites the jump's 4-byte displacement in the cold path; taking
the branch is a direct call that lands on the jump and flows straight to the
current target, with no condition evaluated anywhere on the hot path.

Stubs come from a pool built up front, because every invocation site of a
stub is a direct call fixed when the pool is laid out. Exhausting the pool
for a signature shape is reported as the same hazard as two live instances
sharing an entry point.
"""

from __future__ import annotations

import ctypes
import os
import threading

from . import codepatch
from ._asm import Asm, RAX
from .codepatch import JMP_REL32_LEN, ProtectionMode, Rel32Patch, encode_rel32, region_for
from .errors import BranchError, DuplicateEntryPoint
from .memory import PAGE_SIZE, ExecArena

STUB_SLOT = 64          # one cache line per stub so patches never snoop a neighbour
DEFAULT_POOL_SIZE = 8
SAFE_MODE_ENV = "SEMISTATIC_SAFE_MODE"


class Signature:
    """Argument/return shape of a branch, in ctypes terms."""

    def __init__(self, restype, argtypes=()):
        self.restype = restype
        self.argtypes = tuple(argtypes)
        names = [getattr(t, "__name__", str(t)) for t in self.argtypes]
        self.key = f"{getattr(restype, '__name__', 'void')}({','.join(names)})"
        self._functype = ctypes.CFUNCTYPE(restype, *self.argtypes)

    def bind(self, addr: int):
        return self._functype(addr)

    def __repr__(self):
        return f"Signature<{self.key}>"

    def __eq__(self, other):
        return isinstance(other, Signature) and self.key == other.key

    def __hash__(self):
        return hash(self.key)


class EntryStub:
    """A pooled entry point: 5-byte jump slot plus its fixed direct call site."""

    __slots__ = ("entry", "call_site", "signature_key", "safe_domain", "in_use")

    def __init__(self, entry: int, call_site: int, signature_key: str, safe_domain: bool):
        self.entry = entry
        self.call_site = call_site
        self.signature_key = signature_key
        self.safe_domain = safe_domain
        self.in_use = False


class JumpTable:
    """Precomputed rel32 displacements, one per target, for a given stub."""

    def __init__(self, entry: int, targets):
        if len(targets) < 2:
            raise ValueError("a branch needs at least 2 targets")
        self.targets = [int(t) for t in targets]
        self.offsets = [encode_rel32(entry, t, JMP_REL32_LEN) for t in self.targets]

    def __len__(self):
        return len(self.offsets)

    def offset(self, idx: int) -> Rel32Patch:
        return self.offsets[idx]


class StubRegistry:
    """Tracks entry addresses bound to live branches; duplicates are a bug."""

    def __init__(self):
        self._entries = set()

    def add(self, entry: int):
        if entry in self._entries:
            raise DuplicateEntryPoint()
        self._entries.add(entry)

    def remove(self, entry: int):
        self._entries.discard(entry)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, entry: int):
        return entry in self._entries


class StubPool:
    """Fixed stub inventory per signature shape, laid out at build time.

    Each stub slot is pre-armed with a jump to the pool's inert target, so a
    never-acquired or released stub dispatches somewhere harmless. Call sites
    (one `call rel32; ret` snippet per stub) are generated next to each other
    in the code region and never modified afterwards.
    """

    def __init__(self, arena: ExecArena, per_signature: int = DEFAULT_POOL_SIZE):
        self.arena = arena
        self.per_signature = per_signature
        self._free = {}      # (signature_key, safe_domain) -> [EntryStub]
        self._pages = {True: [], False: []}   # safe_domain -> [(page, used_slots)]
        a = Asm()
        a.xor_rr(RAX, RAX)
        a.raw(bytes([0x66, 0x0F, 0xEF, 0xC0]))  # pxor xmm0, xmm0
        a.ret()
        self.inert_target = arena.place(a)

    def acquire(self, signature: Signature, safe_domain: bool = False) -> EntryStub:
        key = (signature.key, safe_domain)
        if key not in self._free:
            self._free[key] = self._build_batch(signature, safe_domain)
        for stub in self._free[key]:
            if not stub.in_use:
                stub.in_use = True
                return stub
        raise DuplicateEntryPoint()

    def release(self, stub: EntryStub):
        stub.in_use = False

    def _build_batch(self, signature: Signature, safe_domain: bool):
        stubs = []
        for _ in range(self.per_signature):
            entry = self._alloc_slot(safe_domain)
            site = Asm()
            site.call_abs(entry)
            site.ret()
            call_site = self.arena.place(site)
            stubs.append(EntryStub(entry, call_site, signature.key, safe_domain))
        return stubs

    def _alloc_slot(self, safe_domain: bool) -> int:
        pages = self._pages[safe_domain]
        if not pages or pages[-1][1] + STUB_SLOT > PAGE_SIZE:
            page = self.arena.reserve_pages(1)
            pages.append([page, 0])
        page, used = pages[-1]
        entry = page + used
        pages[-1][1] = used + STUB_SLOT
        self._write_slot(entry, safe_domain)
        return entry

    def _write_slot(self, entry: int, safe_domain: bool):
        patch = encode_rel32(entry, self.inert_target)
        slot = bytes([codepatch.JMP_REL32_OPCODE]) + patch.data
        slot += b"\xcc" * (STUB_SLOT - len(slot))
        region = region_for(entry, STUB_SLOT)
        if safe_domain:
            codepatch.set_region_protection(region, ProtectionMode.READ_WRITE_EXEC, self.arena)
        self.arena.write(entry, slot)
        if safe_domain:
            codepatch.set_region_protection(region, ProtectionMode.READ_EXEC, self.arena)


def _direction_index(direction, fanout: int) -> int:
    # Boolean conditions keep if/else ordering: True selects the first target.
    if isinstance(direction, bool):
        idx = 0 if direction else 1
    else:
        idx = int(direction)
    if not 0 <= idx < fanout:
        raise IndexError(f"direction {direction!r} out of range for {fanout} targets")
    return idx


class SemiStaticBranch:
    """One live binding of an entry stub to N targets.

    set_direction / set_direction_safe must be serialized externally against
    each other and against take(); the construct is not thread-safe under
    mutation. take() alone may be called from any thread.
    """

    def __init__(self, runtime: "Runtime", stub: EntryStub, table: JumpTable,
                 signature: Signature, direction: int, safe_mode: bool):
        self._runtime = runtime
        self._stub = stub
        self._table = table
        self._signature = signature
        self._direction = direction
        self._safe_mode = safe_mode
        self._writes = 0
        self._released = False
        self._cfunc = signature.bind(stub.call_site)
        self.warm_count = 1

    # -- introspection -------------------------------------------------------

    @property
    def entry_address(self) -> int:
        return self._stub.entry

    @property
    def call_site(self) -> int:
        return self._stub.call_site

    @property
    def direction(self) -> int:
        return self._direction

    @property
    def writes(self) -> int:
        return self._writes

    @property
    def fanout(self) -> int:
        return len(self._table)

    @property
    def targets(self):
        return tuple(self._table.targets)

    @property
    def safe_mode(self) -> bool:
        return self._safe_mode

    def offset_table_u32(self):
        return [p.as_u32() for p in self._table.offsets]

    # -- direction control ----------------------------------------------------

    def set_direction(self, direction) -> None:
        """Point the stub at targets[direction]; no store if unchanged."""
        self._check_live()
        idx = _direction_index(direction, len(self._table))
        if idx == self._direction:
            return
        if self._safe_mode:
            self._store_locked(idx)
        else:
            codepatch.write_jump(self._stub.entry, self._table.offset(idx),
                                 arm=False, arena=self._runtime.arena)
        self._direction = idx
        self._writes += 1

    def set_direction_safe(self, direction) -> None:
        """As set_direction, but the stub page is writable only for the store."""
        self._check_live()
        idx = _direction_index(direction, len(self._table))
        if idx == self._direction:
            return
        self._store_locked(idx)
        self._direction = idx
        self._writes += 1

    def _store_locked(self, idx: int):
        arena = self._runtime.arena
        region = region_for(self._stub.entry, JMP_REL32_LEN)
        codepatch.set_region_protection(region, ProtectionMode.READ_WRITE_EXEC, arena)
        try:
            arena.intrinsics.store_u32(self._stub.entry + 1,
                                       self._table.offset(idx).as_u32())
        finally:
            codepatch.set_region_protection(region, ProtectionMode.READ_EXEC, arena)

    # -- hot path ---------------------------------------------------------------

    def take(self, *args):
        """Call the current target through the stub's fixed call site."""
        return self._cfunc(*args)

    def warm(self, *args) -> None:
        """Prime the jump's BTB entry and target lines from cold code."""
        self._check_live()
        for _ in range(self.warm_count):
            self._cfunc(*args)

    def smc_buffer(self) -> None:
        """Flush the stub's cache line and burn a fixed unit of work, as a
        temporal barrier between a patch store and the next take()."""
        self._check_live()
        self._runtime.arena.intrinsics.smc_buffer(self._stub.entry)

    # -- lifecycle ---------------------------------------------------------------

    def release(self) -> None:
        """Return the stub to the pool, re-pointed at the inert target."""
        if self._released:
            return
        inert = encode_rel32(self._stub.entry, self._runtime.pool.inert_target)
        if self._stub.safe_domain:
            arena = self._runtime.arena
            region = region_for(self._stub.entry, JMP_REL32_LEN)
            codepatch.set_region_protection(region, ProtectionMode.READ_WRITE_EXEC, arena)
            try:
                arena.intrinsics.store_u32(self._stub.entry + 1, inert.as_u32())
            finally:
                codepatch.set_region_protection(region, ProtectionMode.READ_EXEC, arena)
        else:
            codepatch.write_jump(self._stub.entry, inert, arm=False,
                                 arena=self._runtime.arena)
        self._runtime.registry.remove(self._stub.entry)
        self._runtime.pool.release(self._stub)
        self._released = True

    def _check_live(self):
        if self._released:
            raise BranchError("branch has been released")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


class LockedBranch:
    """Mutual-exclusion wrapper for multi-threaded direction changes.

    Serializes set_direction and take against each other with one lock. The
    cost is substantial relative to a bare take; this exists for correctness
    in threaded settings, not for the latency-critical path.
    """

    def __init__(self, branch: SemiStaticBranch):
        self.branch = branch
        self._lock = threading.Lock()

    def set_direction(self, direction):
        with self._lock:
            self.branch.set_direction(direction)

    def take(self, *args):
        with self._lock:
            return self.branch.take(*args)


class FallbackBranch:
    """Indirect-dispatch stand-in for hosts that cannot patch code.

    Functional tests only; never benchmarked. Holds plain Python callables
    and mirrors the SemiStaticBranch API surface used by tests.
    """

    def __init__(self, callables, initial_direction=0):
        if len(callables) < 2:
            raise ValueError("a branch needs at least 2 targets")
        self._callables = list(callables)
        self._direction = _direction_index(initial_direction, len(callables))
        self._writes = 0

    @property
    def direction(self):
        return self._direction

    @property
    def writes(self):
        return self._writes

    def set_direction(self, direction):
        idx = _direction_index(direction, len(self._callables))
        if idx == self._direction:
            return
        self._direction = idx
        self._writes += 1

    set_direction_safe = set_direction

    def take(self, *args):
        return self._callables[self._direction](*args)

    def warm(self, *args):
        self._callables[self._direction](*args)

    def smc_buffer(self):
        pass

    def release(self):
        pass


class Runtime:
    """Owns the arena, stub pool, and registry; entry point for creating branches."""

    def __init__(self, arena_size: int = 4 << 20, pool_size: int = DEFAULT_POOL_SIZE,
                 safe_mode: "bool | None" = None):
        self.arena = ExecArena(arena_size)
        self.pool = StubPool(self.arena, pool_size)
        self.registry = StubRegistry()
        if safe_mode is None:
            safe_mode = os.environ.get(SAFE_MODE_ENV, "") not in ("", "0")
        self.safe_mode = safe_mode

    def create(self, targets, signature: Signature, initial_direction=0,
               safe_mode: "bool | None" = None) -> SemiStaticBranch:
        """Bind a stub to `targets` (code addresses sharing `signature`).

        Displacements are validated before any code byte is modified; arming
        the stub and patching the initial direction happen as one step.
        """
        if safe_mode is None:
            safe_mode = self.safe_mode
        stub = self.pool.acquire(signature, safe_domain=safe_mode)
        try:
            table = JumpTable(stub.entry, targets)
            idx = _direction_index(initial_direction, len(table))
            self.registry.add(stub.entry)
        except Exception:
            self.pool.release(stub)
            raise
        try:
            if safe_mode:
                region = region_for(stub.entry, JMP_REL32_LEN)
                codepatch.set_region_protection(region, ProtectionMode.READ_WRITE_EXEC, self.arena)
                try:
                    codepatch.write_jump(stub.entry, table.offset(idx), arm=True,
                                         arena=self.arena)
                finally:
                    codepatch.set_region_protection(region, ProtectionMode.READ_EXEC, self.arena)
            else:
                codepatch.write_jump(stub.entry, table.offset(idx), arm=True,
                                     arena=self.arena)
        except Exception:
            self.registry.remove(stub.entry)
            self.pool.release(stub)
            raise
        return SemiStaticBranch(self, stub, table, signature, idx, safe_mode)

    def place(self, asm: Asm, align: int = 16) -> int:
        """Assemble a target (or any snippet) into the arena; returns its address."""
        return self.arena.place(asm, align)

    def close(self):
        self.arena.close()


_default_runtime = None


def default_runtime() -> Runtime:
    global _default_runtime
    if _default_runtime is None:
        _default_runtime = Runtime()
    return _default_runtime


def create(targets, signature: Signature, initial_direction=0,
           safe_mode: "bool | None" = None) -> SemiStaticBranch:
    """Create a branch on the process-wide default runtime."""
    return default_runtime().create(targets, signature, initial_direction, safe_mode)
