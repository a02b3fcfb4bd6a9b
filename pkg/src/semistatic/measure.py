"""Serialized cycle measurement, overhead calibration, and sample statistics.

Timestamp reads are LFENCE-fenced on both sides so the measured code cannot
be reordered across either read; the measured region runs inside a generated
machine-code loop, so interpreter overhead never lands between the reads.
RDTSC counts reference cycles (fixed nominal frequency), not core clock
cycles; all values reported here are reference cycles.

Measurement data is treated as a distribution: a calibration pass measures
the cost of the fenced reads themselves, whose mean (computed with outliers
excluded) is subtracted from every later sample.
"""

from __future__ import annotations

import ctypes
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._asm import RAX, RBX, RDI, RSI, R12, R13, R14, Asm
from .branch import Runtime, default_runtime
from .errors import EmptySet

WARMUP_ITERATIONS = 100_000    # discarded from the front of every measurement loop
CALIBRATION_ITERATIONS = 10_000_000
OUTLIER_MEDIAN_FACTOR = 3.0    # calibration samples above 3x the median are excluded

_default_overhead = 0.0


@dataclass(frozen=True)
class CycleSample:
    cycles: int


@dataclass
class SampleSet:
    """Cycle samples plus the measurement overhead to subtract from them."""

    raw: np.ndarray
    overhead_mean: float = 0.0
    label: str = ""

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.uint64)

    @property
    def n(self) -> int:
        return len(self.raw)

    def corrected(self) -> np.ndarray:
        """max(raw - overhead_mean, 0) per sample, as float64."""
        return np.maximum(self.raw.astype(np.float64) - self.overhead_mean, 0.0)

    @property
    def clamped_count(self) -> int:
        """How many samples were clipped at zero by overhead subtraction."""
        return int((self.raw.astype(np.float64) < self.overhead_mean).sum())


@dataclass
class SummaryStats:
    n: int
    mean: float
    median: float
    sd: float
    min: float
    max: float
    bin_edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    def __str__(self):
        return (f"n={self.n} M={self.median:.1f} SD={self.sd:.1f} "
                f"mean={self.mean:.2f} range=[{self.min:.0f}, {self.max:.0f}]")


@dataclass(frozen=True)
class RankTestResult:
    u_statistic: float
    p_value: float


def lower_median(values: np.ndarray) -> float:
    """Median using the lower of the two central values for even n.

    Fixed convention so independent implementations agree bit-for-bit on
    integer cycle data.
    """
    v = np.sort(np.asarray(values))
    if len(v) == 0:
        raise EmptySet("no samples")
    return float(v[(len(v) - 1) // 2])


def summarize(samples, bin_width: float = 1.0, label: str = "") -> SummaryStats:
    """Distribution summary of a SampleSet (or raw array) in corrected cycles."""
    if isinstance(samples, SampleSet):
        values = samples.corrected()
        label = label or samples.label
    else:
        values = np.asarray(samples, dtype=np.float64)
    if len(values) == 0:
        raise EmptySet("no samples to summarize")
    lo = math.floor(values.min())
    hi = math.ceil(values.max()) + bin_width
    edges = np.arange(lo, hi + bin_width, bin_width)
    counts, edges = np.histogram(values, bins=edges)
    return SummaryStats(
        n=len(values),
        mean=float(values.mean()),
        median=lower_median(values),
        sd=float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        min=float(values.min()),
        max=float(values.max()),
        bin_edges=edges,
        counts=counts,
    )


# -- measurement kernels -------------------------------------------------------


class CycleTimer:
    """Generated measurement loops over a runtime's code arena.

    One kernel exists per measured thunk; each iteration wraps the thunk's
    direct call in two serialized timestamp reads and stores the delta.
    """

    def __init__(self, runtime: "Runtime | None" = None):
        self.runtime = runtime or default_runtime()
        self._kernels = {}

    def _kernel(self, thunk_addr: "int | None", arg: "int | None"):
        key = (thunk_addr, arg)
        if key in self._kernels:
            return self._kernels[key]
        a = Asm()
        for r in (RBX, R12, R13, R14):
            a.push(r)
        a.mov_rr(R12, RDI)        # iteration count
        a.mov_rr(R13, RSI)        # sample buffer
        a.xor_rr(RBX, RBX)
        top = a.bind(a.label())
        a.serialized_tsc()
        a.mov_rr(R14, RAX)
        if thunk_addr is not None:
            if arg is not None:
                a.mov_ri(RDI, arg)
            a.call_abs(thunk_addr)
        a.serialized_tsc()
        a.sub_rr(RAX, R14)
        a.store_sib(R13, RBX, 8, RAX, 8)
        a.inc(RBX)
        a.cmp_rr(RBX, R12)
        a.jcc("b", top)
        for r in (R14, R13, R12, RBX):
            a.pop(r)
        a.ret()
        addr = self.runtime.place(a)
        fn = ctypes.CFUNCTYPE(None, ctypes.c_uint64, ctypes.c_void_p)(addr)
        self._kernels[key] = fn
        return fn

    def measure(self, thunk_addr: "int | None", iterations: int,
                arg: "int | None" = None) -> np.ndarray:
        """Cycle deltas for `iterations` calls; `arg` is baked into rdi."""
        fn = self._kernel(thunk_addr, arg)
        buf = np.empty(iterations, dtype=np.uint64)
        fn(iterations, buf.ctypes.data)
        return buf


_timers = {}


def _timer(runtime: "Runtime | None" = None) -> CycleTimer:
    rt = runtime or default_runtime()
    if id(rt) not in _timers:
        _timers[id(rt)] = CycleTimer(rt)
    return _timers[id(rt)]


def measure_cycles(thunk_addr: "int | None", runtime: "Runtime | None" = None) -> CycleSample:
    """One raw (uncorrected) measurement of a call to `thunk_addr`.

    `None` measures an empty region: both timestamp reads back to back,
    which is the measurement overhead itself.
    """
    return CycleSample(int(_timer(runtime).measure(thunk_addr, 1)[0]))


def sample_calls(thunk_addr: "int | None", iterations: int,
                 warmup: int = WARMUP_ITERATIONS, label: str = "",
                 overhead: "float | None" = None,
                 runtime: "Runtime | None" = None) -> SampleSet:
    """Measure `iterations` calls after a discarded warm-up phase."""
    warmup = min(warmup, iterations)  # degenerate cases in tests
    raw = _timer(runtime).measure(thunk_addr, iterations + warmup)[warmup:]
    return SampleSet(raw, _default_overhead if overhead is None else overhead, label)


def calibrate_overhead(iterations: int = CALIBRATION_ITERATIONS,
                       warmup: int = WARMUP_ITERATIONS,
                       runtime: "Runtime | None" = None) -> SampleSet:
    """Measure the fenced-read overhead and store its mean for later subtraction.

    The mean excludes outliers (samples above 3x the sample median). The
    returned set carries the computed overhead, so its corrected values are
    centred near zero.
    """
    raw = _timer(runtime).measure(None, iterations + warmup)[warmup:]
    med = lower_median(raw)
    kept = raw[raw <= OUTLIER_MEDIAN_FACTOR * max(med, 1.0)]
    mean = float(kept.mean()) if len(kept) else 0.0
    set_default_overhead(mean)
    return SampleSet(raw, mean, "calibration")


def set_default_overhead(mean: float):
    global _default_overhead
    _default_overhead = float(mean)


def default_overhead() -> float:
    return _default_overhead


def estimate_tsc_hz(interval: float = 0.05, runtime: "Runtime | None" = None) -> float:
    """Rough reference-cycle frequency, from TSC deltas across a sleep."""
    rt = runtime or default_runtime()
    tsc = rt.arena.intrinsics.read_tsc
    a = tsc()
    time.sleep(interval)
    return (tsc() - a) / interval


def find_modes(values, bin_width: float = 2.0, min_prominence_frac: float = 0.08,
               max_modes: int = 4):
    """Locate distribution modes by topographic prominence.

    Histogram the values, smooth lightly, and report local maxima whose
    prominence (height above the highest saddle separating them from taller
    terrain) exceeds `min_prominence_frac` of the tallest bin. Returns
    (bin_center, prominence) pairs, most prominent first; bimodality checks
    take the top two.
    """
    if isinstance(values, SampleSet):
        values = values.corrected()
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise EmptySet("no samples")
    lo = math.floor(values.min())
    hi = math.ceil(values.max()) + bin_width
    edges = np.arange(lo, hi + bin_width, bin_width)
    counts, edges = np.histogram(values, bins=edges)
    sm = np.convolve(counts.astype(np.float64), np.array([1.0, 2.0, 1.0]) / 4.0,
                     mode="same")
    peaks = [i for i in range(len(sm))
             if sm[i] > 0
             and (i == 0 or sm[i] > sm[i - 1])
             and (i == len(sm) - 1 or sm[i] >= sm[i + 1])]
    modes = []
    for i in peaks:
        saddles = []
        for rng in (range(i - 1, -1, -1), range(i + 1, len(sm))):
            low = sm[i]
            saddle = 0.0
            for j in rng:
                if sm[j] > sm[i]:
                    saddle = low
                    break
                low = min(low, sm[j])
            saddles.append(saddle)
        prom = sm[i] - max(saddles)
        if prom >= min_prominence_frac * sm.max():
            modes.append((prom, float(edges[i] + bin_width / 2)))
    modes.sort(reverse=True)
    return [(center, prom) for prom, center in modes[:max_modes]]


# -- Mann-Whitney U ------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    n = len(values)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2.0 + 1.0
        i = j + 1
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


def _tie_term(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    return float((counts.astype(np.float64) ** 3 - counts).sum())


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


EXACT_THRESHOLD = 20  # below this pooled size, enumerate the permutation distribution


def mann_whitney_u(a, b) -> RankTestResult:
    """Two-sided Mann-Whitney U test with midrank ties.

    U = n1*n2 + n1*(n1+1)/2 - R1 where R1 is the rank sum of `a`. For pooled
    sizes below 20 the p-value enumerates every assignment of the observed
    values; otherwise a normal approximation with tie-corrected variance and
    continuity correction is used.
    """
    xa = a.corrected() if isinstance(a, SampleSet) else np.asarray(a, dtype=np.float64)
    xb = b.corrected() if isinstance(b, SampleSet) else np.asarray(b, dtype=np.float64)
    n1, n2 = len(xa), len(xb)
    if n1 < 1 or n2 < 1:
        raise EmptySet("both samples need at least one value")
    pooled = np.concatenate([xa, xb])
    ranks = _midranks(pooled)
    r1 = float(ranks[:n1].sum())
    u = n1 * n2 + n1 * (n1 + 1) / 2.0 - r1
    mu = n1 * n2 / 2.0

    if n1 + n2 < EXACT_THRESHOLD:
        p = _exact_p(ranks, n1, n2, abs(u - mu))
    else:
        n = n1 + n2
        tie = _tie_term(pooled)
        var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
        if var <= 0:
            p = 1.0
        else:
            diff = abs(u - mu)
            z = max(diff - 0.5, 0.0) / math.sqrt(var)
            p = min(1.0, 2.0 * _norm_sf(z))
    return RankTestResult(u, p)


def _exact_p(ranks: np.ndarray, n1: int, n2: int, observed_dev: float) -> float:
    """Permutation p-value over all C(n1+n2, n1) assignments of the pooled ranks."""
    n = n1 + n2
    mu = n1 * n2 / 2.0
    base = n1 * n2 + n1 * (n1 + 1) / 2.0
    hits = 0
    total = 0
    for combo in itertools.combinations(range(n), n1):
        r1 = sum(ranks[i] for i in combo)
        if abs(base - r1 - mu) >= observed_dev - 1e-9:
            hits += 1
        total += 1
    return hits / total
