"""Exception types shared across the package."""


class CapabilityError(ValueError):
    """A derivative of higher order than a field or map supports was requested."""


class SimulationError(RuntimeError):
    """A simulated state became non-finite."""


class CertificateError(RuntimeError):
    """A noise law's splitting certificate is inconsistent with its sampler."""


class ResourceCapError(RuntimeError):
    """A computation would exceed the configured memory cap."""


class WeightError(ValueError):
    """An integration-by-parts weight was requested where gamma is singular."""


class GuardError(ValueError):
    """The inverse-flow step guard does not hold."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class EstimatorError(RuntimeError):
    """A Monte Carlo estimator met a non-finite integrand."""
