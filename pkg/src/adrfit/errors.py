"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Caller passed arguments violating a documented precondition."""


class ConfigError(Exception):
    """Run configuration is malformed; message names the offending key."""


class DegenerateDataError(InvalidInputError):
    """Measurement series cannot be normalized (e.g. all-zero data)."""


class SimulationFailure(Exception):
    """A forward simulation could not be completed.

    Carries a diagnostic payload (time, step size, state snapshot) when the
    failure happened inside the integrator.
    """

    def __init__(self, message, *, time=None, step=None, state=None):
        super().__init__(message)
        self.time = time
        self.step = step
        self.state = state


class IntegrationFailure(SimulationFailure):
    """Adaptive integration stalled (step underflow or Newton breakdown)."""


class KineticsDomainError(SimulationFailure):
    """Kinetic rate evaluation left its admissible domain.

    The integrator treats this as a recoverable step failure and retries
    with a smaller step before escalating to :class:`IntegrationFailure`.
    """
