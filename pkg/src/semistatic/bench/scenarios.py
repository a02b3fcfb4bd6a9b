"""The nine benchmark scenarios.

Each scenario assembles its measurement loops, runs them after a discarded
warm-up pass, and reports per-variant cycle distributions (plus hardware
event counts where the host provides them). Sample retention is
deterministic: every variant keeps the lowest `trim_quantile` fraction of
its samples in iteration order, so a (scenario, seed, iterations) triple
always yields the same row count. S8 keeps everything; its spikes are the
signal.

Hot-path infrequency (S6-S8) is emulated with unmeasured per-iteration
filler: branchy message generation plus a dependent multiply-accumulate
chain. The filler is load-bearing twice over: it keeps the patch store's
machine-clear cost out of the measured region, and its data-dependent
branches deny the predictor a trivial loop-position key.
"""

from __future__ import annotations

import ctypes
import os
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .._asm import Asm, RAX, RCX, RDX, RDI, R9, R10, RBX, RBP, R15
from ..branch import Runtime, SemiStaticBranch
from ..errors import BranchError, CapabilityMissing, PermissionDenied, UnsupportedEvent
from ..measure import (
    SampleSet, SummaryStats, lower_median, mann_whitney_u, summarize,
)
from .. import measure, perf, targets
from ..targets import SIG_I64_NOARG, SIG_VOID_NOARG, SIG_VOID_PTR
from .kernels import (
    BranchState, Buffers, LoopKernel, assert_no_patch_in_measured, build_loop,
    build_worker, emit_filler, emit_load_cond, emit_mac_chain,
    emit_pthread_call, emit_set_direction, emit_smc_buffer, emit_spin_lock,
    emit_spin_unlock, emit_touch,
)

WARMUP_ITERATIONS = 100_000
TRIM_QUANTILE = 0.995
SUMMARY_OUTLIER_FACTOR = 3.0    # summaries drop samples above 3x the raw median
CYCLE_ITERATIONS = 10_000_000   # default for cycle-level scenarios
COUNTER_ITERATIONS = 1_000_000  # default for counter-level scenarios
COUNTER_CHECKPOINTS = 10
SUBSET_SIZE = 40                # rank tests run on small subsets of the samples
SUBSET_COUNT = 5

S8_INTERVALS = (1, 10, 100, 1000, 10000)


def summary_values(raw: np.ndarray) -> np.ndarray:
    """Samples feeding a variant's summary: raw values at or below 3x the
    raw lower-median. A pure function of the retained CSV rows, so any
    reader of the CSV reproduces the printed statistics exactly."""
    raw = np.asarray(raw, dtype=np.uint64)
    med = lower_median(raw)
    return raw[raw <= SUMMARY_OUTLIER_FACTOR * max(med, 1.0)]


@dataclass
class ScenarioConfig:
    scenario: str
    iterations: "int | None" = None
    seed: int = 42
    warming: bool = False        # restrict to warmed arms where applicable
    buffer: bool = False         # restrict to buffered arms where applicable
    safe_mode: bool = False
    switch_fanout: int = 5
    change_interval: "int | None" = None
    pin_core: "int | None" = None
    filler_macs: "int | None" = None
    events_file: "str | None" = None
    out: "str | None" = None
    strict_counters: bool = False
    trim_quantile: float = TRIM_QUANTILE

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.switch_fanout < 2:
            raise ValueError("switch_fanout must be >= 2")

    def resolved_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return (COUNTER_ITERATIONS if self.scenario in ("s2", "s4", "s5")
                else CYCLE_ITERATIONS)


@dataclass
class VariantResult:
    variant: str
    indices: np.ndarray          # iteration index of each retained sample
    samples: np.ndarray          # retained raw cycle samples
    overhead: float
    summary: SummaryStats
    counters: "list[tuple[str, int, int]]" = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def sample_set(self) -> SampleSet:
        """Summary-grade samples (outlier rule applied), overhead-corrected."""
        return SampleSet(summary_values(self.samples), self.overhead, self.variant)


@dataclass
class ScenarioResult:
    scenario: str
    config: ScenarioConfig
    variants: "list[VariantResult]"
    notes: "list[str]" = field(default_factory=list)
    comparisons: dict = field(default_factory=dict)   # (a, b) -> p-value

    def variant(self, name: str) -> VariantResult:
        for v in self.variants:
            if v.variant == name:
                return v
        raise KeyError(name)

    def iter_rows(self):
        """CSV rows: scenario,variant,iter,value,counter.

        Cycle samples carry an empty counter field. Event counts use the
        counter name, with cumulative iterations in the iter column. Each
        variant also carries its calibration overhead (in millicycles) so
        CSV consumers can reproduce the corrected statistics.
        """
        for v in self.variants:
            yield (self.scenario, v.variant, 0, round(v.overhead * 1000),
                   "overhead_millicycles")
            for i, val in zip(v.indices, v.samples):
                yield (self.scenario, v.variant, int(i), int(val), "")
            for name, iters, count in v.counters:
                yield (self.scenario, v.variant, int(iters), int(count), name)

    def write_csv(self, path: str):
        with open(path, "w") as f:
            f.write("scenario,variant,iter,value,counter\n")
            chunk = []
            for row in self.iter_rows():
                chunk.append("%s,%s,%d,%d,%s" % row)
                if len(chunk) >= 1_000_000:
                    f.write("\n".join(chunk))
                    f.write("\n")
                    chunk.clear()
            if chunk:
                f.write("\n".join(chunk))
                f.write("\n")

    def describe(self) -> str:
        lines = [f"scenario {self.scenario}"]
        for v in self.variants:
            lines.append(f"  {v.variant:<24} {v.summary}")
            for name, iters, count in v.counters:
                lines.append(f"  {v.variant:<24} {name}={count} over {iters} iters "
                             f"({count / max(iters, 1):.3f}/iter)")
            for k, val in v.notes.items():
                lines.append(f"  {v.variant:<24} {k}={val}")
        for (a, b), p in self.comparisons.items():
            lines.append(f"  comparison {a} vs {b}: p={p:.6g}")
        for note in self.notes:
            lines.append(f"  note: {note}")
        return "\n".join(lines)


class _Session:
    """Shared state for one scenario run: runtime, calibration, buffers."""

    def __init__(self, cfg: ScenarioConfig):
        if cfg.pin_core is not None:
            os.sched_setaffinity(0, {cfg.pin_core})
        self.cfg = cfg
        self.n = cfg.resolved_iterations()
        self.rt = Runtime(arena_size=32 << 20)
        self.bufs = Buffers()
        self.rng = np.random.default_rng(cfg.seed)
        self.notes = []
        cal_iters = max(100_000, min(10_000_000, 10 * self.n))
        self.overhead = measure.calibrate_overhead(
            cal_iters, runtime=self.rt).overhead_mean
        self._raw_events = None

    # -- conditions ------------------------------------------------------------

    def conditions(self, fanout: int = 2) -> "tuple[int, np.ndarray]":
        """Seeded random directions for every iteration incl. warm-up."""
        seq = self.rng.integers(0, fanout, self.n + WARMUP_ITERATIONS,
                                dtype=np.uint8)
        return self.bufs.u8_array(seq), seq

    def interval_conditions(self, interval: int) -> "tuple[int, np.ndarray]":
        idx = (np.arange(self.n + WARMUP_ITERATIONS) // interval) % 2
        seq = idx.astype(np.uint8)
        return self.bufs.u8_array(seq), seq

    # -- collection ---------------------------------------------------------------

    def collect(self, name: str, kernel: LoopKernel, trim: bool = True,
                skip_warm_run: bool = False) -> VariantResult:
        if not skip_warm_run:
            scratch = np.empty(WARMUP_ITERATIONS, dtype=np.uint64)
            kernel(WARMUP_ITERATIONS, scratch)
        buf = np.empty(self.n, dtype=np.uint64)
        ret = kernel(self.n, buf)
        if trim:
            keep = int(np.ceil(self.cfg.trim_quantile * self.n))
            order = np.argsort(buf, kind="stable")[:keep]
            idx = np.sort(order)
        else:
            idx = np.arange(self.n)
        samples = buf[idx]
        v = VariantResult(name, idx, samples, self.overhead, None,
                          notes={"kernel_return": int(ret)} if ret else {})
        v.summary = summarize(v.sample_set())
        return v

    def collect_interleaved(self, arms, chunks: int = 10, trim: bool = True):
        """Collect several arms in alternating chunks.

        Arms that run back-to-back see different frequency/scheduling
        environments; alternating chunks expose every arm to the same drift,
        which is what makes the A-vs-B rank tests meaningful.
        """
        arms = list(arms)
        scratch = np.empty(WARMUP_ITERATIONS, dtype=np.uint64)
        for _, kernel in arms:
            kernel(WARMUP_ITERATIONS, scratch)
        chunk = max(1, self.n // chunks)
        sizes = [chunk] * (chunks - 1) + [self.n - chunk * (chunks - 1)]
        bufs = {name: np.empty(self.n, dtype=np.uint64) for name, _ in arms}
        pos = 0
        for size in sizes:
            for name, kernel in arms:
                view = bufs[name][pos:pos + size]
                kernel(size, view)
            pos += size
        results = []
        for name, _ in arms:
            buf = bufs[name]
            if trim:
                keep = int(np.ceil(self.cfg.trim_quantile * self.n))
                idx = np.sort(np.argsort(buf, kind="stable")[:keep])
            else:
                idx = np.arange(self.n)
            samples = buf[idx]
            v = VariantResult(name, idx, samples, self.overhead, None)
            v.summary = summarize(v.sample_set())
            results.append(v)
        return results

    def count_over(self, variant: VariantResult, kernel: LoopKernel,
                   counter_name: str, spec: "perf.PerfEventSpec | None"):
        """Cumulative event counts at checkpoints across a fresh run."""
        if spec is None:
            return
        try:
            counter = perf.open_counter(spec)
        except (PermissionDenied, UnsupportedEvent) as e:
            self._counter_note(counter_name, str(e))
            return
        chunk = max(1, self.n // COUNTER_CHECKPOINTS)
        buf = np.empty(chunk, dtype=np.uint64)
        total_iters = 0
        total = 0
        with counter:
            kernel(min(WARMUP_ITERATIONS, chunk), buf)  # warm outside the count
            for _ in range(COUNTER_CHECKPOINTS):
                counter.reset()
                counter.enable()
                kernel(chunk, buf)
                counter.disable()
                total += counter.read()
                total_iters += chunk
                variant.counters.append((counter_name, total_iters, total))

    def _counter_note(self, counter_name: str, reason: str):
        note = f"counter {counter_name} unavailable; cycles only ({reason})"
        if self.cfg.strict_counters:
            raise CapabilityMissing(note)
        if note not in self.notes:
            self.notes.append(note)

    def raw_events(self) -> perf.RawEvents:
        if self._raw_events is None:
            self._raw_events = perf.resolve_raw_events(self.cfg.events_file)
        return self._raw_events

    def raw_spec(self, kind: str) -> "perf.PerfEventSpec | None":
        code = getattr(self.raw_events(), kind)
        if code is None:
            self._counter_note(kind, f"no raw event in table ({self.raw_events().source})")
            return None
        return perf.PerfEventSpec("raw", code)

    def subset_p(self, a: VariantResult, b: VariantResult) -> float:
        """Median p over SUBSET_COUNT small-subset rank tests."""
        xa = a.sample_set().corrected()
        xb = b.sample_set().corrected()
        rng = np.random.default_rng(self.cfg.seed + 1)
        m = min(SUBSET_SIZE, len(xa), len(xb))
        ps = sorted(
            mann_whitney_u(rng.choice(xa, m, replace=False),
                           rng.choice(xb, m, replace=False)).p_value
            for _ in range(SUBSET_COUNT))
        return ps[len(ps) // 2]

    def filler_macs(self, default: int) -> int:
        return self.cfg.filler_macs if self.cfg.filler_macs is not None else default

    def check_equal_cost(self, addr_a: int, addr_b: int, arg: "int | None" = None,
                         tolerance: float = 1.0):
        """Branch bodies must cost the same; verified before the scenario."""
        timer = measure.CycleTimer(self.rt)
        for attempt in range(3):
            timer.measure(addr_a, 20_000, arg)
            timer.measure(addr_b, 20_000, arg)
            med_a = lower_median(timer.measure(addr_a, 100_000, arg))
            med_b = lower_median(timer.measure(addr_b, 100_000, arg))
            if abs(med_a - med_b) <= tolerance:
                return
        raise BranchError(
            f"branch bodies are not cost-balanced: medians {med_a} vs {med_b}")

    def close(self):
        self.rt.close()


# -- scenario bodies ---------------------------------------------------------------


def _s1_patch_vs_store(s: _Session) -> ScenarioResult:
    """Direction-store cost against an equal store to non-executable memory."""
    tg = [targets.empty(s.rt), targets.empty(s.rt)]
    br = s.rt.create(tg, SIG_VOID_NOARG, safe_mode=s.cfg.safe_mode)
    bs = BranchState(br, s.bufs)
    data_dst = s.bufs.bytes_buffer(64)

    def make(dest):
        def cold(a):
            a.mov_rr(RCX, RBX)
            a.and_ri(RCX, 1)
        def measured(a):
            a.mov_ri(R10, bs.table_addr)
            a.load_sib(RAX, R10, RCX, 4, 4)
            a.mov_ri(R10, dest)
            a.store(R10, 0, RAX, 4)
        return build_loop(s.rt, measured, cold=cold)

    variants = s.collect_interleaved([
        ("patch", make(bs.stub_entry + 1)),
        ("store", make(data_dst)),
    ])
    res = ScenarioResult("s1", s.cfg, variants, s.notes)
    res.comparisons[("patch", "store")] = s.subset_p(variants[0], variants[1])
    return res


def _s2_smc_clears(s: _Session) -> ScenarioResult:
    """Patch-then-take in a tight loop; self-modifying-code machine clears."""
    tg = [targets.empty(s.rt), targets.empty(s.rt)]
    br = s.rt.create(tg, SIG_VOID_NOARG, safe_mode=s.cfg.safe_mode)
    bs = BranchState(br, s.bufs)

    def make(buffered):
        def cold(a):
            a.mov_rr(RCX, RBX)
            a.and_ri(RCX, 1)
        def measured(a):
            emit_set_direction(a, bs, cond=RCX, guarded=False, safe=s.cfg.safe_mode)
            if buffered:
                emit_smc_buffer(a, bs.stub_entry)
            a.call_abs(bs.stub_entry)
        return build_loop(s.rt, measured, cold=cold)

    arms = [("unbuffered", False), ("buffered", True)]
    if s.cfg.buffer:
        arms = [("buffered", True)]
    variants = []
    spec = s.raw_spec("smc_clears")
    for name, buffered in arms:
        k = make(buffered)
        v = s.collect(name, k)
        s.count_over(v, k, "smc_clears", spec)
        variants.append(v)
    return ScenarioResult("s2", s.cfg, variants, s.notes)


def _s3_take_vs_call(s: _Session) -> ScenarioResult:
    """Branch-taking against a direct call of the same fixed target."""
    tg = [targets.empty(s.rt), targets.empty(s.rt)]
    br = s.rt.create(tg, SIG_VOID_NOARG, safe_mode=s.cfg.safe_mode)
    br.warm()

    k_take = build_loop(s.rt, lambda a: a.call_abs(br.entry_address))
    k_call = build_loop(s.rt, lambda a: a.call_abs(tg[0]))
    assert_no_patch_in_measured(k_take, br.entry_address)

    variants = s.collect_interleaved([("take", k_take), ("call", k_call)])
    res = ScenarioResult("s3", s.cfg, variants, s.notes)
    res.comparisons[("take", "call")] = s.subset_p(variants[0], variants[1])
    return res


def _s4_baclears(s: _Session) -> ScenarioResult:
    """Alternating directions invalidate the jump's BTB entry; count re-steers."""
    tg = [targets.empty(s.rt), targets.empty(s.rt)]
    br = s.rt.create(tg, SIG_VOID_NOARG, safe_mode=s.cfg.safe_mode)
    bs = BranchState(br, s.bufs)

    def make(alternating, buffered=False, warmed=False):
        def cold(a):
            if alternating:
                a.mov_rr(RCX, RBX)
                a.and_ri(RCX, 1)
            else:
                a.xor_rr(RCX, RCX)
            emit_set_direction(a, bs, cond=RCX, guarded=True, safe=s.cfg.safe_mode)
            if buffered:
                emit_mac_chain(a, 128)
            if warmed:
                a.call_abs(bs.stub_entry)
        return build_loop(s.rt, lambda a: a.call_abs(bs.stub_entry), cold=cold)

    arms = [("alternating", dict(alternating=True)),
            ("buffered", dict(alternating=True, buffered=True)),
            ("static", dict(alternating=False))]
    if s.cfg.buffer:
        arms = [a for a in arms if a[0] == "buffered"]
    if s.cfg.warming:
        arms = [("warmed", dict(alternating=True, warmed=True))]
    variants = []
    spec = s.raw_spec("baclears")
    for name, kw in arms:
        k = make(**kw)
        v = s.collect(name, k)
        s.count_over(v, k, "baclears", spec)
        variants.append(v)
    return ScenarioResult("s4", s.cfg, variants, s.notes)


def _s5_warming(s: _Session) -> ScenarioResult:
    """S4's alternating loop with the jump pre-taken in the cold region."""
    tg = [targets.empty(s.rt), targets.empty(s.rt)]
    br = s.rt.create(tg, SIG_VOID_NOARG, safe_mode=s.cfg.safe_mode)
    bs = BranchState(br, s.bufs)

    def make(warmed):
        def cold(a):
            a.mov_rr(RCX, RBX)
            a.and_ri(RCX, 1)
            emit_set_direction(a, bs, cond=RCX, guarded=True, safe=s.cfg.safe_mode)
            if warmed:
                a.call_abs(bs.stub_entry)
        return build_loop(s.rt, lambda a: a.call_abs(bs.stub_entry), cold=cold)

    variants = []
    spec = s.raw_spec("baclears")
    for name, warmed in [("unwarmed", False), ("warmed", True)]:
        k = make(warmed)
        v = s.collect(name, k)
        s.count_over(v, k, "baclears", spec)
        variants.append(v)
    return ScenarioResult("s5", s.cfg, variants, s.notes)


S6_FILLER_MACS = 128


def _hot_path_bodies(s: _Session):
    payload = s.bufs.bytes_buffer(64)
    flag = s.bufs.bytes_buffer(64)
    msg = s.bufs.bytes_buffer(64)
    body_a = targets.send_order(s.rt, payload, flag)
    body_b = targets.send_order(s.rt, payload, flag)
    s.check_equal_cost(body_a, body_b, arg=msg)
    return msg, payload, flag, body_a, body_b


def _hot_path_kernels(s: _Session, cond_addr, msg, payload, flag, body_a, body_b,
                      macs):
    """The S6/S8 loop pair: conditional statement vs set-then-take."""
    br = s.rt.create([body_a, body_b], SIG_VOID_PTR, safe_mode=s.cfg.safe_mode)
    bs = BranchState(br, s.bufs)

    def cold(a, semistatic, warming):
        emit_load_cond(a, cond_addr, dst=RCX)
        if semistatic:
            emit_set_direction(a, bs, cond=RCX, guarded=True, safe=s.cfg.safe_mode)
        emit_filler(a, msg, macs)
        if warming:
            emit_touch(a, payload, flag)
        if semistatic and s.cfg.safe_mode:
            emit_load_cond(a, cond_addr, dst=RCX)  # rcx lost to the syscalls

    def measured_cond(a):
        a.mov_ri(RDI, msg)
        els = a.label()
        end = a.label()
        a.test_rr(RCX, RCX)
        a.jcc("ne", els)
        a.call_abs(body_a)   # direction 0 (condition true) is the first target
        a.jmp(end)
        a.bind(els)
        a.call_abs(body_b)
        a.bind(end)

    def measured_ss(a):
        a.mov_ri(RDI, msg)
        a.call_abs(br.entry_address)

    def setup(a):
        a.mov_ri(RBP, s.cfg.seed | 1)

    kernels = {}
    for warming in (False, True):
        suffix = "_warm" if warming else ""
        kernels["cond" + suffix] = build_loop(
            s.rt, measured_cond,
            cold=lambda a, w=warming: cold(a, False, w), setup=setup)
        k = build_loop(
            s.rt, measured_ss,
            cold=lambda a, w=warming: cold(a, True, w), setup=setup)
        assert_no_patch_in_measured(k, br.entry_address)
        kernels["semistatic" + suffix] = k
    return kernels, br


def _s6_hot_path(s: _Session) -> ScenarioResult:
    """Random conditions on an emulated hot path, with and without cache warming."""
    msg, payload, flag, body_a, body_b = _hot_path_bodies(s)
    cond_addr, _ = s.conditions(2)
    macs = s.filler_macs(S6_FILLER_MACS)
    kernels, _ = _hot_path_kernels(s, cond_addr, msg, payload, flag,
                                   body_a, body_b, macs)
    names = list(kernels)
    if s.cfg.warming:
        names = [n for n in names if n.endswith("_warm")]
    variants = s.collect_interleaved([(n, kernels[n]) for n in names])
    res = ScenarioResult("s6", s.cfg, variants, s.notes)
    by = {v.variant: v for v in variants}
    if "cond" in by and "semistatic" in by:
        res.comparisons[("cond", "semistatic")] = s.subset_p(by["cond"], by["semistatic"])
    if "cond_warm" in by and "semistatic_warm" in by:
        res.comparisons[("cond_warm", "semistatic_warm")] = s.subset_p(
            by["cond_warm"], by["semistatic_warm"])
    return res


S7_FILLER_MACS = 256


def _s7_switch(s: _Session) -> ScenarioResult:
    """N-way dispatch: jump-table switch against an N-target branch."""
    fan = s.cfg.switch_fanout
    tg = [targets.empty(s.rt) for _ in range(fan)]
    br = s.rt.create(tg, SIG_VOID_NOARG, safe_mode=s.cfg.safe_mode)
    bs = BranchState(br, s.bufs)
    idx_addr, _ = s.conditions(fan)
    msg = s.bufs.bytes_buffer(64)
    table, table_addr = s.bufs.u64_array(fan)
    macs = s.filler_macs(S7_FILLER_MACS)

    case_labels = []

    def measured_switch(a):
        end = a.label()
        cases = [a.label() for _ in range(fan)]
        a.cmp_ri(RCX, fan)
        a.jcc("ae", end)
        a.mov_ri(R10, table_addr)
        a.jmp_sib(R10, RCX, 8)
        for i, lbl in enumerate(cases):
            a.bind(lbl)
            a.call_abs(tg[i])
            a.jmp(end)
        a.bind(end)
        case_labels[:] = cases

    def setup(a):
        a.mov_ri(RBP, s.cfg.seed | 1)

    def cold_switch(a):
        emit_load_cond(a, idx_addr, dst=RCX)
        emit_filler(a, msg, macs)

    def cold_ss(a):
        emit_load_cond(a, idx_addr, dst=RCX)
        emit_set_direction(a, bs, cond=RCX, guarded=True, safe=s.cfg.safe_mode)
        emit_filler(a, msg, macs)

    k_switch = build_loop(s.rt, measured_switch, cold=cold_switch, setup=setup)
    for i, lbl in enumerate(case_labels):
        table[i] = k_switch.addr + lbl.pos
    k_ss = build_loop(s.rt, lambda a: a.call_abs(br.entry_address),
                      cold=cold_ss, setup=setup)
    assert_no_patch_in_measured(k_ss, br.entry_address)

    variants = s.collect_interleaved([("switch", k_switch), ("semistatic", k_ss)])
    res = ScenarioResult("s7", s.cfg, variants, s.notes)
    res.comparisons[("switch", "semistatic")] = s.subset_p(variants[0], variants[1])
    return res


def _s8_frequency_sweep(s: _Session) -> ScenarioResult:
    """Condition flips every K iterations; per-iteration timelines, untrimmed."""
    msg, payload, flag, body_a, body_b = _hot_path_bodies(s)
    intervals = ([s.cfg.change_interval] if s.cfg.change_interval
                 else list(S8_INTERVALS))
    macs = s.filler_macs(S6_FILLER_MACS)
    variants = []
    spec = None
    try:
        ok, why = perf.perf_available()
        if ok:
            spec = perf.PerfEventSpec("hardware", perf.PERF_COUNT_HW_BRANCH_MISSES)
        else:
            s._counter_note("branch_misses", why)
    except Exception as e:  # capability probing must never kill the run
        s._counter_note("branch_misses", str(e))

    for interval in intervals:
        cond_addr, _ = s.interval_conditions(interval)
        kernels, _ = _hot_path_kernels(s, cond_addr, msg, payload, flag,
                                       body_a, body_b, macs)
        for arm in ("cond", "semistatic"):
            name = f"{arm}_k{interval}"
            v = s.collect(name, kernels[arm], trim=False)
            v.notes["change_interval"] = interval
            if spec is not None:
                s.count_over(v, kernels[arm], "branch_misses", spec)
                if v.counters:
                    _, iters, misses = v.counters[-1]
                    v.notes["mispredict_rate"] = misses / iters
                    v.notes["mispredicts_per_change"] = misses * interval / iters
            variants.append(v)
    return ScenarioResult("s8", s.cfg, variants, s.notes)


def _s9_multithread(s: _Session) -> ScenarioResult:
    """A worker thread flips a shared condition (and patches the branch);
    the main loop dispatches through it, with and without mutual exclusion."""
    act0 = targets.const_i64(s.rt, 0)
    act1 = targets.const_i64(s.rt, 1)
    br = s.rt.create([act0, act1], SIG_I64_NOARG, initial_direction=0)
    bs = BranchState(br, s.bufs)
    lock_kind = bs.attach_mutex(s.bufs)
    cond_addr = s.bufs.bytes_buffer(64)
    stop_addr = s.bufs.bytes_buffer(64)
    stop_byte = ctypes.c_uint8.from_address(stop_addr)
    cond_byte = ctypes.c_uint8.from_address(cond_addr)
    spin = s.cfg.change_interval or 2000
    if lock_kind == "spin":
        s.notes.append("pthread mutex unresolvable; using a spinlock")

    def emit_lock(a):
        if lock_kind == "pthread":
            emit_pthread_call(a, bs.pthread_lock, bs.mutex_addr)
        else:
            emit_spin_lock(a, bs.mutex_addr)

    def emit_unlock(a):
        if lock_kind == "pthread":
            emit_pthread_call(a, bs.pthread_unlock, bs.mutex_addr)
        else:
            emit_spin_unlock(a, bs.mutex_addr)

    def make_main(arm):
        def setup(a):
            a.xor_rr(R15, R15)                # wrong-branch counter
        def cold(a):
            a.mov_ri(R10, cond_addr)
            a.load(RBP, R10, 0, 1)            # expected direction
        def measured(a):
            if arm == "cond":
                els = a.label()
                end = a.label()
                a.test_rr(RBP, RBP)
                a.jcc("ne", els)
                a.call_abs(act0)
                a.jmp(end)
                a.bind(els)
                a.call_abs(act1)
                a.bind(end)
            else:
                if arm == "mutex":
                    # re-read the expected direction under the lock; the
                    # worker flips and patches inside the same lock
                    emit_lock(a)
                    a.mov_ri(R10, cond_addr)
                    a.load(RBP, R10, 0, 1)
                a.call_abs(br.entry_address)
                if arm == "mutex":
                    a.mov_rr(RCX, RAX)
                    emit_unlock(a)
                    a.mov_rr(RAX, RCX)
            a.mov_rr(R9, RAX)                 # keep the executed target's id
        def post(a):
            if arm == "cond":
                return
            ok = a.label()
            a.cmp_rr(R9, RBP)
            a.jcc("e", ok)
            a.inc(R15)
            a.bind(ok)
        return build_loop(s.rt, measured, cold=cold, setup=setup, post=post,
                          result_reg=R15)

    variants = []
    for arm in ("cond", "nosync", "mutex"):
        worker_lock = lock_kind if arm == "mutex" else None
        _, worker = build_worker(s.rt, cond_addr, stop_addr, spin,
                                 branch_state=bs if arm != "cond" else None,
                                 lock=worker_lock)
        kernel = make_main(arm)
        stop_byte.value = 0
        cond_byte.value = 0
        if arm != "cond":
            br.set_direction(0)
            bs.cur.value = 0
        flips = {}
        th = threading.Thread(target=lambda w=worker: flips.setdefault("n", w()))
        th.start()
        try:
            v = s.collect(arm if arm == "cond" else f"semistatic_{arm}", kernel)
        finally:
            stop_byte.value = 1
            th.join()
        wrong = v.notes.pop("kernel_return", 0)
        if arm != "cond":
            v.notes["wrong_branch_count"] = wrong
            v.counters.append(("wrong_branch", s.n, wrong))
        v.notes["condition_flips"] = flips.get("n", 0)
        variants.append(v)
    return ScenarioResult("s9", s.cfg, variants, s.notes)


SCENARIOS = {
    "s1": _s1_patch_vs_store,
    "s2": _s2_smc_clears,
    "s3": _s3_take_vs_call,
    "s4": _s4_baclears,
    "s5": _s5_warming,
    "s6": _s6_hot_path,
    "s7": _s7_switch,
    "s8": _s8_frequency_sweep,
    "s9": _s9_multithread,
}


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Run one scenario; writes CSV when cfg.out is set."""
    session = _Session(cfg)
    try:
        result = SCENARIOS[cfg.scenario](session)
        if cfg.out:
            result.write_csv(cfg.out)
        return result
    finally:
        session.close()


def capability_report(events_file: "str | None" = None) -> str:
    """What this host can run, and which scenarios degrade or drop out."""
    import platform
    from ..memory import PAGE_SIZE, host_supported

    lines = ["capability report"]
    lines.append(f"  platform: {platform.system()} {platform.machine()}")
    lines.append(f"  page size: {PAGE_SIZE}")
    supported = host_supported()
    lines.append(f"  x86-64 linux: {'yes' if supported else 'NO - hardware scenarios unavailable'}")
    rwx = False
    tsc = 0.0
    if supported:
        try:
            rt = Runtime(arena_size=1 << 20)
            rwx = True
            tsc = measure.estimate_tsc_hz(runtime=rt)
            rt.close()
        except BranchError as e:
            lines.append(f"  executable pages: refused ({e})")
    lines.append(f"  writable code pages: {'yes' if rwx else 'no'}")
    if tsc:
        lines.append(f"  tsc frequency: {tsc / 1e9:.2f} GHz (reference cycles)")
    para = perf.paranoid_level()
    lines.append(f"  perf_event_paranoid: {para if para is not None else 'not present'}")
    ok, why = (perf.perf_available() if supported else (False, "unsupported platform"))
    lines.append(f"  perf_event_open: {'yes' if ok else f'no ({why})'}")
    if not ok:
        lines.append("  note: set kernel.perf_event_paranoid <= 2 (or run privileged) "
                     "for hardware event counts")
    raw = perf.resolve_raw_events(events_file)
    lines.append(f"  raw event table: {raw.source}; "
                 f"smc_clears={hex(raw.smc_clears) if raw.smc_clears else 'n/a'}, "
                 f"baclears={hex(raw.baclears) if raw.baclears else 'n/a'}")

    base = supported and rwx
    counters = {
        "s1": None, "s3": None, "s6": None, "s7": None, "s9": None,
        "s2": ("smc_clears", raw.smc_clears),
        "s4": ("baclears", raw.baclears),
        "s5": ("baclears", raw.baclears),
        "s8": ("branch_misses", True),
    }
    for name in sorted(SCENARIOS):
        need = counters[name]
        if not base:
            status = "unavailable (needs x86-64 Linux with writable code pages)"
        elif need is None:
            status = "runnable"
        elif not ok:
            status = f"degraded: cycles only ({need[0]} needs perf access)"
        elif need[1] in (None, False):
            status = f"degraded: cycles only (no {need[0]} raw event for this CPU)"
        else:
            status = "runnable"
        lines.append(f"  {name}: {status}")
    if not base:
        lines.append("  correctness tests remain runnable via the indirect-dispatch "
                     "fallback (functional only, never benchmarked)")
    return "\n".join(lines)
