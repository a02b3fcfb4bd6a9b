"""Runtime branch patching for x86-64 Linux.

Separates branch-direction selection (cold path: rewrite a jump displacement)
from branch taking (hot path: one always-predicted relative jump), plus a
cycle-accurate measurement toolkit and benchmark scenarios.
"""

from .branch import (
    FallbackBranch,
    JumpTable,
    LockedBranch,
    Runtime,
    SemiStaticBranch,
    Signature,
    StubPool,
    StubRegistry,
    create,
    default_runtime,
)
from .codepatch import (
    PageRegion,
    ProtectionMode,
    Rel32Patch,
    encode_rel32,
    flush_code_line,
    jump_target,
    page_base,
    region_for,
    set_region_protection,
    write_jump,
)
from .errors import (
    BranchError,
    CapabilityMissing,
    DisplacementOutOfRange,
    DuplicateEntryPoint,
    EmptySet,
    PermissionDenied,
    PlatformError,
    ReadFailure,
    UnsupportedEvent,
    UnsupportedPlatform,
)
from .measure import (
    CycleSample,
    RankTestResult,
    SampleSet,
    SummaryStats,
    calibrate_overhead,
    mann_whitney_u,
    measure_cycles,
    sample_calls,
    summarize,
)

__version__ = "0.1.0"
