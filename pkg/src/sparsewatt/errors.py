"""Exception hierarchy shared by all sparsewatt modules."""


class SparseWattError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SparseWattError, ValueError):
    """An argument lies outside the operation's domain."""


class CapacityError(SparseWattError):
    """A rank-local index space would not fit into 32-bit local indices."""


class PartitionError(SparseWattError):
    """Row ranges do not form a valid contiguous partition."""


class ProtocolError(SparseWattError):
    """A message did not match what the communication plan expected."""


class ContractError(SparseWattError):
    """An operation was called without its preconditions being met."""


class BreakdownError(SparseWattError, ArithmeticError):
    """A Krylov solver hit a non-positive or vanishing curvature."""


class CapabilityError(SparseWattError, NotImplementedError):
    """A named variant exists but is not available in this build."""


class SizingError(SparseWattError):
    """No task grid is compatible with the requested experiment size."""


class BackendError(SparseWattError):
    """A power backend could not be started."""


class InsufficientDataError(SparseWattError):
    """Too few readings or samples to compute the requested quantity."""


class NestingError(SparseWattError):
    """Region marks are not properly nested."""


class ParseError(SparseWattError):
    """A file did not follow the expected format."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class NoActivityError(SparseWattError):
    """A power timeline never leaves the idle baseline."""


class EstimationError(SparseWattError):
    """Static power could not be estimated (empty idle windows)."""


class ConfigError(SparseWattError):
    """An experiment configuration is invalid."""
