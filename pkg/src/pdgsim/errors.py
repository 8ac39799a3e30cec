"""Exception types shared across the package."""


class PdgsimError(Exception):
    """Base class for all package errors."""


class GraphError(PdgsimError, ValueError):
    """A graph, record, or knowledge-base file violates an invariant."""


class EstimationError(PdgsimError, ValueError):
    """A demand estimate cannot be computed from the given inputs."""


class ExhaustedDistributionError(EstimationError):
    """Attained service exceeds every sample of the demand distribution.

    The caller must refresh the estimate (or apply the overrun penalty)
    rather than treat the remaining time as negative.
    """


class ConfigError(PdgsimError, ValueError):
    """An experiment configuration file is invalid."""
