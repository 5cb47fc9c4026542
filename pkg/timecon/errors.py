from typing import Iterable, Optional


class TimeconError(Exception):
    """Base class for every error raised by timecon."""


class DomainError(TimeconError):
    """Invalid level, shape or parameter value."""


class SizeError(TimeconError):
    """A tree or enumeration would exceed a configured cap."""

    def __init__(self, message: str, limit: Optional[float] = None):
        super().__init__(message)
        self.limit = limit


class ProblemValidationError(TimeconError):
    """A probe contradicts a declared property of a problem (e.g. its Lipschitz constant)."""


class StructureError(TimeconError):
    """A declared monotonicity or linearity structure fails its probes."""


class ConfigError(TimeconError):
    """Numerical or experiment configuration cannot be used as given."""


class EmptySetError(TimeconError):
    """A nodal or candidate set is empty where a point is required."""


class TreeModeError(TimeconError):
    """Operation needs path information the tree mode does not carry."""


class InvalidCylinderError(TimeconError):
    """Caller-supplied path derivatives fail the functional Ito probe."""


class DegenerateUtilityError(TimeconError):
    """Linear utility weights are both zero; the value is identically zero."""


class OutOfScopeError(TimeconError):
    """Registered identifier whose problem is intentionally not implemented."""


class UnknownExperimentError(TimeconError):
    def __init__(self, name: str, valid: Iterable[str]):
        self.valid = sorted(valid)
        super().__init__(f"Unknown experiment '{name}'. Valid experiments: {', '.join(self.valid)}")
