"""Error hierarchy shared by the optocool modules.

The CLI maps these onto exit codes: configuration problems exit with 2,
physics and runtime failures with 3. ``OSError`` (exit 4) is left as is.
"""


class OptocoolError(Exception):
    """Base class for all optocool errors."""

    exit_code = 3


class ConfigError(OptocoolError, ValueError):
    """A scenario file or parameter set failed validation."""

    exit_code = 2


class PhysicsError(OptocoolError, ValueError):
    """A physical model was evaluated outside its domain."""


class ReadoutSingularError(PhysicsError):
    """The split-mode readout transfer vanishes (gamma_split == kappa)."""


class SimulationError(OptocoolError, RuntimeError):
    """The stochastic integration could not produce a trajectory."""


class LoopUnstableError(SimulationError):
    """The feedback loop drove the oscillator amplitude out of bounds."""


class FitError(OptocoolError, RuntimeError):
    """A spectral fit did not converge or the data cannot constrain it."""

    def __init__(self, message: str, last_iterate: object = None, residual: float = float("nan")):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class CalibrationError(OptocoolError, RuntimeError):
    """A calibration procedure could not extract its parameter."""
