"""Exception hierarchy shared across the toolkit."""


class ReformkitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(ReformkitError, ValueError):
    """A file or record could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConflictError(ReformkitError, ValueError):
    """Duplicate identifiers or conflicting artifacts."""


class ValidationError(ReformkitError, ValueError):
    """A data structure violates its invariants."""


class PreconditionError(ReformkitError, ValueError):
    """An operation was called with arguments outside its domain."""


class IndexStateError(ReformkitError, RuntimeError):
    """An index or store was used before it was built."""


class TransportError(ReformkitError, ConnectionError):
    """Remote endpoint unreachable after bounded retries."""


class ProtocolError(ReformkitError, RuntimeError):
    """Remote endpoint rejected a request or answered malformed data."""

    def __init__(self, message, provider_message=None, status_code=None):
        self.provider_message = provider_message
        self.status_code = status_code
        super().__init__(message)


class ReformulationError(ReformkitError, RuntimeError):
    """A reformulation method could not produce any usable content."""


class ConfigError(ReformkitError, ValueError):
    """Experiment configuration is unparseable or invalid."""
