"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all sslface errors."""


class DataError(ToolkitError):
    """Bad input data: unreadable images, malformed protocol files, missing paths."""


class PairsParseError(DataError):
    """Malformed pairs-protocol file; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ResolutionError(DataError):
    """Pair list references image files that do not exist."""

    def __init__(self, missing_paths):
        self.missing_paths = list(missing_paths)
        preview = ", ".join(str(p) for p in self.missing_paths[:5])
        more = "" if len(self.missing_paths) <= 5 else f" (+{len(self.missing_paths) - 5} more)"
        super().__init__(f"missing image files: {preview}{more}")


class FitError(ToolkitError):
    """Numeric fitting failed (degenerate data, non-finite values, empty levels)."""


class ModelIOError(ToolkitError):
    """Model container cannot be written or read back (version, checksum, truncation)."""


class OracleUnavailable(ToolkitError):
    """Label oracle cannot answer right now; the active loop should suspend."""
