"""In-process hardware event counting via the perf_event_open syscall.

Counting mode only: a counter is opened disabled, then driven with the
reset / enable / run / disable / read ioctl sequence so the count covers
exactly the code between enable and disable. Kernel, hypervisor, idle, and
guest events are excluded by default.

Generic hardware events (instructions, branch misses) come from the
portable event set. Microarchitecture-specific raw events (SMC machine
clears, BAC re-steers) are resolved from an event table file keyed by CPU
vendor/model, never hard-coded.
"""

from __future__ import annotations

import configparser
import ctypes
import os
import struct
from dataclasses import dataclass, field

from .errors import PermissionDenied, ReadFailure, UnsupportedEvent

_NR_PERF_EVENT_OPEN = 298  # x86-64

PERF_TYPE_HARDWARE = 0
PERF_TYPE_RAW = 4

PERF_COUNT_HW_CPU_CYCLES = 0
PERF_COUNT_HW_INSTRUCTIONS = 1
PERF_COUNT_HW_BRANCH_INSTRUCTIONS = 4
PERF_COUNT_HW_BRANCH_MISSES = 5

PERF_EVENT_IOC_ENABLE = 0x2400
PERF_EVENT_IOC_DISABLE = 0x2401
PERF_EVENT_IOC_RESET = 0x2403

# perf_event_attr flag bits (bitfield offsets from the kernel ABI)
FLAG_DISABLED = 1 << 0
FLAG_EXCLUDE_KERNEL = 1 << 5
FLAG_EXCLUDE_HV = 1 << 6
FLAG_EXCLUDE_IDLE = 1 << 7
FLAG_EXCLUDE_GUEST = 1 << 20

_libc = ctypes.CDLL(None, use_errno=True)


class _PerfEventAttr(ctypes.Structure):
    _fields_ = [
        ("type", ctypes.c_uint32),
        ("size", ctypes.c_uint32),
        ("config", ctypes.c_uint64),
        ("sample_period", ctypes.c_uint64),
        ("sample_type", ctypes.c_uint64),
        ("read_format", ctypes.c_uint64),
        ("flags", ctypes.c_uint64),
        ("wakeup_events", ctypes.c_uint32),
        ("bp_type", ctypes.c_uint32),
        ("config1", ctypes.c_uint64),
        ("config2", ctypes.c_uint64),
        ("branch_sample_type", ctypes.c_uint64),
        ("sample_regs_user", ctypes.c_uint64),
        ("sample_stack_user", ctypes.c_uint32),
        ("clockid", ctypes.c_int32),
        ("sample_regs_intr", ctypes.c_uint64),
        ("aux_watermark", ctypes.c_uint32),
        ("sample_max_stack", ctypes.c_uint16),
        ("_reserved2", ctypes.c_uint16),
        ("aux_sample_size", ctypes.c_uint32),
        ("_reserved3", ctypes.c_uint32),
        ("sig_data", ctypes.c_uint64),
    ]


ATTR_SIZE_VER0 = 64  # oldest ABI size; zero-extended tail is accepted by newer kernels


@dataclass(frozen=True)
class PerfEventSpec:
    """Event selector: generic hardware id or raw PMU code."""

    event_type: str            # "hardware" or "raw"
    config: int
    exclude_kernel: bool = True
    exclude_idle: bool = True
    exclude_hv: bool = True
    exclude_guest: bool = True

    def type_code(self) -> int:
        if self.event_type == "hardware":
            return PERF_TYPE_HARDWARE
        if self.event_type == "raw":
            return PERF_TYPE_RAW
        raise ValueError(f"unknown event type {self.event_type!r}")


class Counter:
    """An open perf event fd, driven with reset/enable/disable/read."""

    def __init__(self, fd: int, spec: PerfEventSpec):
        self.fd = fd
        self.spec = spec

    def reset(self):
        self._ioctl(PERF_EVENT_IOC_RESET)

    def enable(self):
        self._ioctl(PERF_EVENT_IOC_ENABLE)

    def disable(self):
        self._ioctl(PERF_EVENT_IOC_DISABLE)

    def read(self) -> int:
        data = os.read(self.fd, 8)
        if len(data) != 8:
            raise ReadFailure(f"short counter read ({len(data)} bytes)")
        return struct.unpack("<Q", data)[0]

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def _ioctl(self, req: int):
        if _libc.ioctl(self.fd, req, 0) != 0:
            err = ctypes.get_errno()
            raise ReadFailure(f"perf ioctl {req:#x} failed (errno {err})")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_counter(spec: PerfEventSpec) -> Counter:
    """Open a disabled counter for this process on any CPU.

    PermissionDenied signals the perf paranoid setting (or a sandbox that
    filters the syscall); UnsupportedEvent signals an event this kernel or
    CPU cannot provide.
    """
    attr = _PerfEventAttr()
    attr.type = spec.type_code()
    attr.size = ctypes.sizeof(_PerfEventAttr)
    attr.config = spec.config
    attr.flags = FLAG_DISABLED
    if spec.exclude_kernel:
        attr.flags |= FLAG_EXCLUDE_KERNEL
    if spec.exclude_idle:
        attr.flags |= FLAG_EXCLUDE_IDLE
    if spec.exclude_hv:
        attr.flags |= FLAG_EXCLUDE_HV
    if spec.exclude_guest:
        attr.flags |= FLAG_EXCLUDE_GUEST
    fd = _libc.syscall(ctypes.c_long(_NR_PERF_EVENT_OPEN), ctypes.byref(attr),
                       ctypes.c_int(0), ctypes.c_int(-1), ctypes.c_int(-1),
                       ctypes.c_ulong(0))
    if fd < 0:
        err = ctypes.get_errno()
        if err in (1, 13):  # EPERM, EACCES
            raise PermissionDenied(
                f"perf_event_open refused (errno {err}); check "
                "/proc/sys/kernel/perf_event_paranoid")
        raise UnsupportedEvent(
            f"perf_event_open failed for {spec} (errno {err}, {os.strerror(err)})")
    return Counter(fd, spec)


def counted(thunk, counter: Counter) -> int:
    """Event count attributed to `thunk` only."""
    counter.reset()
    counter.enable()
    try:
        thunk()
    finally:
        counter.disable()
    return counter.read()


def perf_available() -> "tuple[bool, str]":
    """Probe whether basic hardware counting works here."""
    try:
        c = open_counter(PerfEventSpec("hardware", PERF_COUNT_HW_INSTRUCTIONS))
    except (PermissionDenied, UnsupportedEvent) as e:
        return False, str(e)
    c.close()
    return True, "ok"


def paranoid_level() -> "int | None":
    try:
        with open("/proc/sys/kernel/perf_event_paranoid") as f:
            return int(f.read().strip())
    except OSError:
        return None


# -- raw event table ----------------------------------------------------------


@dataclass
class CpuId:
    vendor: str = ""
    family: int = 0
    model: int = 0


def probe_cpu() -> CpuId:
    cpu = CpuId()
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if ":" not in line:
                    continue
                key, _, val = line.partition(":")
                key = key.strip()
                val = val.strip()
                if key == "vendor_id" and not cpu.vendor:
                    cpu.vendor = val
                elif key == "cpu family" and not cpu.family:
                    cpu.family = int(val)
                elif key == "model" and not cpu.model:
                    cpu.model = int(val)
    except (OSError, ValueError):
        pass
    return cpu


def default_events_file() -> str:
    return os.path.join(os.path.dirname(__file__), "bench", "events.toml")


@dataclass
class RawEvents:
    smc_clears: "int | None" = None
    baclears: "int | None" = None
    source: str = "unresolved"


def resolve_raw_events(path: "str | None" = None,
                       cpu: "CpuId | None" = None) -> RawEvents:
    """Pick raw event codes for this CPU from the event table.

    Sections carry a `vendor` and optionally a space-separated `models`
    list; an exact (vendor, model) match beats a bare vendor match.
    """
    path = path or default_events_file()
    cpu = cpu or probe_cpu()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path) as f:
        parser.read_file(f)

    best = None
    best_rank = -1
    for section in parser.sections():
        sec = parser[section]
        if sec.get("vendor", "") != cpu.vendor:
            continue
        models = sec.get("models", "").split()
        if models:
            if str(cpu.model) not in models:
                continue
            rank = 1
        else:
            rank = 0
        if rank > best_rank:
            best, best_rank = section, rank

    if best is None:
        return RawEvents(source="no match for this CPU")
    sec = parser[best]
    def _get(key):
        return int(sec[key], 16) if key in sec else None
    return RawEvents(smc_clears=_get("smc_clears"), baclears=_get("baclears"),
                     source=best)
