"""Exception taxonomy shared across the package.

Every error raised on a documented failure path subclasses one of these, so
callers (and the CLI) can tell configuration mistakes from numerical failures.
"""


class ValidationError(ValueError):
    """Malformed configuration, file content, or argument values."""


class DimensionError(ValidationError):
    """Array shapes or axes that cannot be combined; message names the axis."""


class DomainError(ValidationError):
    """A numeric argument outside its documented domain (e.g. arclength)."""


class TopologyError(ValidationError):
    """A vessel tree or mesh whose connectivity is inconsistent."""


class ContractError(ValueError):
    """An API precondition violated by the caller (e.g. non-scalar loss)."""


class ResourceError(RuntimeError):
    """A configured resource budget (voxels, memory) would be exceeded."""


class SolverError(RuntimeError):
    """An iterative solver failed to converge; carries last residuals."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss); carries the snapshot path."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class CaseError(RuntimeError):
    """A per-case pipeline failure (e.g. no lumen detected in a volume)."""
