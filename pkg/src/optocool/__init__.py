"""optocool: measurement-based feedback cooling of a cavity-read-out mechanical oscillator."""

__version__ = "0.1.0"

from .core import (
    CavityParams,
    FeedbackSettings,
    MeasurementChain,
    NoiseBudget,
    OscillatorParams,
    closed_loop_spectra,
    minimum_occupancy,
    noise_budget,
    phonon_occupancy,
)
from .database import RunCatalog
from .engine import SimConfig, Trajectory, simulate
from .exceptions import (
    CalibrationError,
    ConfigError,
    FitError,
    OptocoolError,
    PhysicsError,
    SimulationError,
)
from .spectral import Psd, SpectrumFit, fit_lorentzian, welch_psd

__all__ = [
    "CavityParams",
    "FeedbackSettings",
    "MeasurementChain",
    "NoiseBudget",
    "OscillatorParams",
    "closed_loop_spectra",
    "minimum_occupancy",
    "noise_budget",
    "phonon_occupancy",
    "RunCatalog",
    "SimConfig",
    "Trajectory",
    "simulate",
    "CalibrationError",
    "ConfigError",
    "FitError",
    "OptocoolError",
    "PhysicsError",
    "SimulationError",
    "Psd",
    "SpectrumFit",
    "fit_lorentzian",
    "welch_psd",
]
