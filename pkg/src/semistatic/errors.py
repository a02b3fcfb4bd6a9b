"""Exception hierarchy for branch patching failures.

The two user-facing construction errors carry fixed diagnostic messages;
callers (and the test suite) rely on their exact wording.
"""


class BranchError(Exception):
    """Base class for all errors raised by this package."""


# Raised before any code byte is modified.
DISPLACEMENT_MESSAGE = (
    "Supplied branch targets (as function pointers) exceed a 2GiB displacement "
    "from the entry point in the text segment, and cannot be reached with a "
    "32-bit relative jump. Consider moving the entry point to different areas "
    "in the text segment by altering hot/cold attributes."
)

DUPLICATE_MESSAGE = (
    "More than once instance for template specialised semi-static conditions "
    "detected. Program terminated as multiple instances sharing the same entry "
    "point is dangerous and results in undefined behaviour (multiple instances "
    "write to same function."
)


class DisplacementOutOfRange(BranchError):
    """A branch target cannot be encoded as a signed 32-bit displacement."""

    def __init__(self, message: str = DISPLACEMENT_MESSAGE):
        super().__init__(message)


class DuplicateEntryPoint(BranchError):
    """A second live instance would share an entry point (stub pool exhausted)."""

    def __init__(self, message: str = DUPLICATE_MESSAGE):
        super().__init__(message)


class UnsupportedPlatform(BranchError):
    """Host is not x86-64 Linux, or executable pages cannot be unlocked."""


class PlatformError(BranchError):
    """An OS-level operation failed; carries the errno."""

    def __init__(self, message: str, errno: int = 0):
        super().__init__(message if not errno else f"{message} (errno {errno})")
        self.errno = errno


class PermissionDenied(BranchError):
    """Hardware counter access refused (perf paranoid level or sandbox)."""


class UnsupportedEvent(BranchError):
    """Hardware event not available on this CPU or kernel."""


class ReadFailure(BranchError):
    """Reading a hardware counter returned short or failed."""


class CapabilityMissing(BranchError):
    """A benchmark scenario requires events or permissions this host lacks."""


class EmptySet(BranchError):
    """Summary statistics requested for an empty sample set."""
