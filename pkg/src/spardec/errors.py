"""Exception hierarchy shared across the package.

Every error raised on purpose derives from SpardecError so callers can
catch the whole family at the CLI boundary and map it to an exit code.
"""


class SpardecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SpardecError):
    """A config value is out of range, malformed, or unknown."""


class ContractError(SpardecError):
    """An operation was handed data that violates its preconditions."""


class StateMachineError(SpardecError):
    """A request-state operation was invoked in the wrong phase."""


class ImpossibleRequestError(SpardecError):
    """A single request can never fit in the configured KV capacity."""


class CalibrationError(SpardecError):
    """Cost-model calibration has too few or degenerate observations."""


class DegenerateParameterError(SpardecError):
    """Cost-model evaluation hit a non-positive or non-finite time."""


class SimulationError(SpardecError):
    """A simulation failed to make progress or violated an invariant."""
