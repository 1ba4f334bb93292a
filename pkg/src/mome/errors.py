"""Exception hierarchy shared by all modules.

Every error carries the process exit code the CLI maps it to:
1 usage, 2 config, 3 I/O or on-disk format, 4 numeric failure.
"""


class MomeError(Exception):
    exit_code = 1
    kind = "error"

    def one_line(self) -> str:
        return f"{self.kind}: {self}"


class UsageError(MomeError):
    exit_code = 1
    kind = "usage"


class ConfigError(MomeError):
    exit_code = 2
    kind = "config"


class FormatError(MomeError):
    """Base for on-disk format violations."""

    exit_code = 3
    kind = "io"


class BadMagicError(FormatError):
    kind = "io/bad-magic"


class TruncatedPayloadError(FormatError):
    kind = "io/truncated"


class DimensionMismatchError(FormatError):
    kind = "io/dimension-mismatch"


class NonBinaryPayloadError(FormatError):
    kind = "io/non-binary"


class ClassCountError(FormatError):
    kind = "io/class-count"


class SidecarError(FormatError):
    kind = "io/sidecar"


class NumericError(MomeError):
    exit_code = 4
    kind = "numeric"
