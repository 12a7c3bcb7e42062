"""Exception types shared across the package."""


class MorsekitError(Exception):
    """Base class for package errors."""


class MalformedSpecError(MorsekitError):
    """Set-valued map specification is inconsistent or does not cover a point."""


class DimensionMismatchError(MorsekitError):
    """Point dimension does not match the map dimension."""


class ResolutionError(MorsekitError):
    """A cover or grid construction exceeded its configured budget."""


class DivergenceError(MorsekitError):
    """A trajectory exceeded the blow-up bound."""


class NotAttractedError(MorsekitError):
    """A cell set reaches the exit sink; omega-limit undefined on the grid."""


class NoAttractorError(MorsekitError):
    """The candidate set is not eventually absorbed; no attractor certificate."""


class TruncationUnsoundError(MorsekitError):
    """Trajectory never settled in the zero zone of the bump weight."""


class InvariantViolationError(MorsekitError):
    """A structural invariant (filtration order, edge direction) failed."""


class ScenarioError(MorsekitError):
    """Scenario file invalid."""


class GoldenMissingError(MorsekitError):
    """Golden report for verification does not exist."""
