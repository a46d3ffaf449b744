"""Exception types shared across the package."""


class ClnetError(Exception):
    """Base class for all package errors."""


class FormatError(ClnetError, ValueError):
    """A file or byte stream does not follow the expected binary/text layout."""


class ConfigurationError(ClnetError, ValueError):
    """A network spec, layer chain or run configuration is inconsistent."""


class DataConsistencyError(ClnetError, ValueError):
    """Related inputs disagree, e.g. frame count vs ground-truth line count."""


class UnsupportedOperationError(ClnetError, NotImplementedError):
    """The requested operation is deliberately not provided (e.g. SAD backward)."""


class TrackerStateError(ClnetError, RuntimeError):
    """Tracker state cannot be advanced (degenerate previous box)."""
