"""Spectral estimation, Lorentzian fitting and occupancy extraction.

PSDs are single-sided densities on an ordinary-frequency grid (Hz): the
integral of a pure tone's PSD equals its mean-square amplitude. Fit
parameters are angular (rad/s).
"""

import hashlib
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate, optimize, signal

from .core import (
    TWO_PI,
    FeedbackSettings,
    NoiseBudget,
    OscillatorParams,
    closed_loop_spectra,
)
from .exceptions import ConfigError, FitError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Band = Tuple[float, float]

MIN_BINS_ACROSS = 10
DEGENERATE_RATIO = 1e3
TRUNCATION_WARNING = 0.01
STRUCTURE_Z = 3.0
STRUCTURE_MIN_RMS = 1e-3


class SpectralUnit(str, Enum):
    """Unit tag carried by spectra so fits never mix conventions."""

    NORMALIZED = "1/Hz"
    POSITION = "m^2/Hz"
    FREQUENCY = "(rad/s)^2/Hz"
    VOLTAGE = "V^2/Hz"


class Psd(BaseModel):
    """Single-sided power spectral density.

    Attributes:
        freq: Strictly increasing frequency grid (Hz).
        value: Density per Hz, non-negative.
        resolution: Bin width (Hz).
        n_averages: Number of averaged segments (1 for analytic spectra).
        unit: Unit tag of ``value``.
        sample_rate: Sampling rate of the source series, if any (Hz).
    """

    freq: FloatArray
    value: FloatArray
    resolution: float = Field(..., gt=0)
    n_averages: int = Field(default=1, ge=1)
    unit: SpectralUnit = SpectralUnit.NORMALIZED
    sample_rate: Optional[float] = Field(default=None, gt=0)

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def _check_grid(self) -> "Psd":
        if len(self.freq) != len(self.value):
            raise ValueError("freq and value must have equal lengths")
        if len(self.freq) > 1 and not np.all(np.diff(self.freq) > 0):
            raise ValueError("freq must be strictly increasing")
        if np.any(self.value < 0):
            raise ValueError("PSD values must be non-negative")
        return self

    @property
    def omega(self) -> FloatArray:
        return TWO_PI * self.freq

    def scaled(self, factor: float) -> "Psd":
        return self.model_copy(update={"value": self.value * factor})

    def select(self, band: Band) -> Tuple[FloatArray, FloatArray]:
        lo, hi = band
        mask = (self.freq >= lo) & (self.freq <= hi)
        return self.freq[mask], self.value[mask]


class SpectrumFit(BaseModel):
    """Result of a Lorentzian-plus-floor fit.

    ``peak`` is the amplitude above the floor at ``omega_center``; it is
    negative only for the signed (noise-squashing) model.
    ``covariance`` is ordered (omega_center, gamma_eff, peak, floor).
    """

    omega_center: float
    gamma_eff: float = Field(..., gt=0)
    peak: float
    floor: float = Field(..., ge=0)
    residual_rms: float = Field(..., ge=0)
    covariance: List[List[float]]
    unit: SpectralUnit = SpectralUnit.NORMALIZED
    window: Band
    weighting: str = "uniform"
    signed_peak: bool = False
    residual_structure: bool = False
    bins_across: float = 0.0
    n_averages: int = 1
    iterations: int = 0

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_peak(self) -> "SpectrumFit":
        if not self.signed_peak and self.peak < 0:
            raise ValueError("peak must be non-negative for the plain model")
        return self

    @property
    def value_at_center(self) -> float:
        return self.floor + self.peak

    def std(self, index: int) -> float:
        return math.sqrt(max(self.covariance[index][index], 0.0))

    def evaluate(self, freq: FloatArray) -> FloatArray:
        return lorentzian(
            TWO_PI * np.asarray(freq, dtype=float),
            self.omega_center,
            self.gamma_eff,
            self.peak,
            self.floor,
        )


class OccupancyEstimate(BaseModel):
    """Occupancies inferred from a fitted peak and floor."""

    n_tot: float
    n_imp: float
    n_tot_err: float
    n_imp_err: float
    n_imp_damped: float = Field(
        ..., description="Imprecision referred to the damped peak, n_imp Γ_eff/Γ_m"
    )

    model_config = ConfigDict(frozen=True)


class PhononEstimate(BaseModel):
    n_m: float
    uncertainty: float
    squashing_artifact: bool = False

    model_config = ConfigDict(frozen=True)


class FitReport(BaseModel):
    fit: SpectrumFit
    occupancies: Optional[OccupancyEstimate] = None
    phonon: Optional[PhononEstimate] = None
    input_sha256: str
    settings: Dict[str, Any] = Field(default_factory=dict)


def lorentzian(
    omega: FloatArray, center: float, gamma: float, peak: float, floor: float
) -> FloatArray:
    half = gamma / 2.0
    return np.asarray(floor + peak * half**2 / ((omega - center) ** 2 + half**2))


def zero_point_level(
    unit: SpectralUnit, osc: OscillatorParams, g0: Optional[float] = None
) -> float:
    """Peak zero-point density S_zp expressed in ``unit``."""
    if unit is SpectralUnit.NORMALIZED:
        return 4.0 / osc.gamma_m
    if unit is SpectralUnit.POSITION:
        return 4.0 * osc.x_zp**2 / osc.gamma_m
    if unit is SpectralUnit.FREQUENCY:
        if g0 is None:
            raise ConfigError("g0 is required for frequency-noise spectra")
        return 4.0 * g0**2 / osc.gamma_m
    raise ConfigError(f"no zero-point level for spectra in {unit.value}")


def welch_psd(
    samples: FloatArray,
    sample_rate: float,
    segment_length: int,
    overlap: float = 0.5,
    unit: SpectralUnit = SpectralUnit.NORMALIZED,
) -> Psd:
    """Hann-windowed, overlap-averaged single-sided PSD.

    Raises:
        ConfigError: For empty or non-finite input, or bad segmenting.
    """
    data = np.asarray(samples, dtype=float)
    if data.size == 0:
        raise ConfigError("cannot estimate a PSD from an empty series")
    if not np.all(np.isfinite(data)):
        raise ConfigError("samples contain non-finite values")
    if not 2 <= segment_length <= data.size:
        raise ConfigError(
            f"segment_length {segment_length} must lie in [2, {data.size}]"
        )
    if not 0.0 <= overlap <= 0.9:
        raise ConfigError(f"overlap {overlap} outside [0, 0.9]")
    noverlap = int(overlap * segment_length)
    freq, value = signal.welch(
        data,
        fs=sample_rate,
        window="hann",
        nperseg=segment_length,
        noverlap=noverlap,
        scaling="density",
        return_onesided=True,
    )
    n_averages = 1 + (data.size - segment_length) // (segment_length - noverlap)
    return Psd(
        freq=freq,
        value=value,
        resolution=sample_rate / segment_length,
        n_averages=n_averages,
        unit=unit,
        sample_rate=sample_rate,
    )


def analytic_psd(
    osc: OscillatorParams,
    budget: NoiseBudget,
    fb: FeedbackSettings,
    freq: FloatArray,
    record: Literal["x", "y"] = "x",
    unit: SpectralUnit = SpectralUnit.NORMALIZED,
    g0: Optional[float] = None,
) -> Psd:
    """Closed-loop spectrum on ``freq`` (Hz) as a Psd in ``unit``."""
    grid = np.asarray(freq, dtype=float)
    spectra = closed_loop_spectra(osc, budget, fb, TWO_PI * grid)
    normalized = spectra.s_x if record == "x" else spectra.s_y
    resolution = float(grid[1] - grid[0]) if grid.size > 1 else 1.0
    return Psd(
        freq=grid,
        value=2.0 * zero_point_level(unit, osc, g0) * normalized,
        resolution=resolution,
        unit=unit,
    )


def band_tail_estimate(psd: Psd, band: Optional[Band] = None) -> float:
    """Variance missed outside ``band``, extrapolating the edge densities.

    Below the band the density is taken flat down to DC; above it a 1/f²
    fall-off is assumed. Edges at DC or at the source Nyquist carry no tail.
    """
    lo, hi = band if band is not None else (psd.freq[0], psd.freq[-1])
    freq, value = psd.select((lo, hi))
    if freq.size == 0:
        return 0.0
    tail = 0.0
    if freq[0] > 0.0:
        tail += value[0] * freq[0]
    nyquist = psd.sample_rate / 2.0 if psd.sample_rate else math.inf
    if freq[-1] < nyquist * (1.0 - 1e-9):
        tail += value[-1] * freq[-1]
    return float(tail)


def integrate_variance(psd: Psd, band: Optional[Band] = None) -> float:
    """Trapezoidal integral of the PSD over ``band`` (whole grid by default).

    For a normalized position spectrum this is ⟨u²⟩ = 2 n_m + 1.
    """
    freq, value = psd.select(band) if band is not None else (psd.freq, psd.value)
    if freq.size < 2:
        raise ConfigError("band contains fewer than two PSD bins")
    variance = float(integrate.trapezoid(value, freq))
    tail = band_tail_estimate(psd, band)
    if variance > 0.0 and tail / variance > TRUNCATION_WARNING:
        logger.warning(
            "band truncation: estimated tail %.4g is %.1f%% of the integral",
            tail,
            100.0 * tail / variance,
        )
    return variance


def _half_width(omega: FloatArray, excess: FloatArray, index: int) -> float:
    target = excess[index] / 2.0
    lo = index
    while lo > 0 and abs(excess[lo - 1]) >= abs(target):
        lo -= 1
    hi = index
    while hi < len(excess) - 1 and abs(excess[hi + 1]) >= abs(target):
        hi += 1
    spacing = omega[1] - omega[0] if len(omega) > 1 else 1.0
    return float(max(omega[hi] - omega[lo], spacing))


def _linear_amplitudes(
    shape: FloatArray, data: FloatArray, weights: FloatArray, signed: bool
) -> Tuple[float, float, float]:
    basis = np.column_stack([shape, np.ones_like(shape)]) * weights[:, None]
    (peak, floor), *_ = np.linalg.lstsq(basis, data * weights, rcond=None)
    if not signed and peak < 0.0:
        peak = 0.0
        floor = float(np.sum(weights**2 * data) / np.sum(weights**2))
    floor = max(floor, 0.0)
    residual = (peak * shape + floor - data) * weights
    return float(peak), float(floor), float(residual @ residual)


def _runs_structure(residual: FloatArray) -> bool:
    signs = np.sign(residual[residual != 0.0])
    n = signs.size
    if n < 10:
        return False
    n_pos = int(np.sum(signs > 0))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return True
    runs = 1 + int(np.sum(signs[1:] != signs[:-1]))
    expected = 2.0 * n_pos * n_neg / n + 1.0
    variance = (expected - 1.0) * (expected - 2.0) / (n - 1.0)
    if variance <= 0.0:
        return False
    return (runs - expected) / math.sqrt(variance) < -STRUCTURE_Z


def fit_lorentzian(
    psd: Psd,
    window: Band,
    weighting: Literal["uniform", "chi2"] = "uniform",
    signed_peak: bool = False,
    max_iterations: int = 200,
) -> SpectrumFit:
    """Fit floor + peak·(Γ/2)²/((Ω − Ω_c)² + (Γ/2)²) inside ``window`` (Hz).

    A coarse grid over (Ω_c, Γ) with the amplitudes solved linearly seeds a
    bounded trust-region least-squares refinement of all four parameters.
    ``signed_peak`` allows a dip below the floor (noise-squashing model).

    Raises:
        FitError: If the window holds no resolvable feature or the
            refinement does not converge.
    """
    freq, data = psd.select(window)
    if freq.size < 8:
        raise FitError(f"window {window} holds only {freq.size} bins")
    omega = TWO_PI * freq
    median = float(np.median(data))
    hump = float(data.max()) - median
    dip = median - float(data.min())
    if max(hump, dip) * DEGENERATE_RATIO <= median or max(hump, dip) == 0.0:
        raise FitError("peak not resolvable")

    use_dip = signed_peak and dip > hump
    index = int(np.argmin(data)) if use_dip else int(np.argmax(data))
    floor_seed = float(np.percentile(data, 90 if use_dip else 10))
    excess = data - floor_seed
    gamma_seed = _half_width(omega, excess, index)

    if weighting == "chi2":
        sigma = np.maximum(data, np.finfo(float).tiny) / math.sqrt(psd.n_averages)
    elif weighting == "uniform":
        sigma = np.ones_like(data)
    else:
        raise ConfigError(f"Unknown weighting: {weighting}")
    weights = 1.0 / sigma

    spacing = float(omega[1] - omega[0])
    best: Optional[Tuple[float, float, float, float, float]] = None
    for center in omega[index] + spacing * np.linspace(-2.0, 2.0, 9):
        for gamma in gamma_seed * np.logspace(-0.7, 0.7, 15):
            shape = lorentzian(omega, center, gamma, 1.0, 0.0)
            peak, floor, cost = _linear_amplitudes(shape, data, weights, signed_peak)
            if best is None or cost < best[4]:
                best = (center, gamma, peak, floor, cost)
    assert best is not None
    c0, g_start, p_start, f_start, _ = best

    s = g_start
    a = max(abs(p_start), abs(f_start), np.finfo(float).tiny)

    def unpack(x: FloatArray) -> Tuple[float, float, float, float]:
        return c0 + s * x[0], s * x[1], a * x[2], a * x[3]

    def residuals(x: FloatArray) -> FloatArray:
        center, gamma, peak, floor = unpack(x)
        return (lorentzian(omega, center, gamma, peak, floor) - data) * weights / a

    def jacobian(x: FloatArray) -> FloatArray:
        center, gamma, peak, _ = unpack(x)
        half = gamma / 2.0
        d = omega - center
        denom = d**2 + half**2
        shape = half**2 / denom
        columns = [
            s * peak * 2.0 * d * half**2 / denom**2,
            s * peak * half * d**2 / denom**2,
            a * shape,
            a * np.ones_like(omega),
        ]
        return np.column_stack(columns) * (weights / a)[:, None]

    lower = [-np.inf, 1e-9, -np.inf if signed_peak else 0.0, 0.0]
    start = np.array([0.0, 1.0, p_start / a, f_start / a])
    start[1] = max(start[1], 1e-9)
    if not signed_peak:
        start[2] = max(start[2], 0.0)
    result = optimize.least_squares(
        residuals,
        start,
        jac=jacobian,
        bounds=(lower, [np.inf] * 4),
        method="trf",
        xtol=1e-9,
        ftol=1e-14,
        gtol=1e-14,
        max_nfev=max_iterations,
    )
    if result.status == 0:
        raise FitError(
            f"fit did not converge in {max_iterations} iterations",
            last_iterate=unpack(result.x),
            residual=float(2.0 * result.cost),
        )

    center, gamma, peak, floor = unpack(result.x)
    gamma = abs(gamma)
    model_residual = lorentzian(omega, center, gamma, peak, floor) - data

    jac = result.jac
    normal = np.linalg.pinv(jac.T @ jac, rcond=1e-12)
    if weighting == "uniform":
        dof = max(freq.size - 4, 1)
        normal = normal * float(2.0 * result.cost) / dof
    scale = np.diag([s, s, a, a])
    covariance = scale @ normal @ scale

    reference = float(np.max(np.abs(data)))
    rms = float(np.sqrt(np.mean(model_residual**2)) / reference)
    structured = rms > STRUCTURE_MIN_RMS and _runs_structure(model_residual)
    if structured:
        logger.warning("fit residuals show systematic structure (noise squashing?)")

    bins_across = gamma / (TWO_PI * psd.resolution)
    if bins_across < MIN_BINS_ACROSS:
        logger.warning(
            "only %.1f bins across the fitted linewidth; %d recommended",
            bins_across,
            MIN_BINS_ACROSS,
        )
    return SpectrumFit(
        omega_center=center,
        gamma_eff=gamma,
        peak=peak,
        floor=floor,
        residual_rms=rms,
        covariance=covariance.tolist(),
        unit=psd.unit,
        window=window,
        weighting=weighting,
        signed_peak=signed_peak,
        residual_structure=structured,
        bins_across=bins_across,
        n_averages=psd.n_averages,
        iterations=int(result.nfev),
    )


def extract_occupancies(
    fit: SpectrumFit, osc: OscillatorParams, g0: Optional[float] = None
) -> OccupancyEstimate:
    """Invert peak ≈ 2(n_tot + 1/2)(Γ_m/Γ_eff)² S_zp and floor = 2 n_imp S_zp.

    The half quantum stays in the peak, so the returned ``n_tot`` excludes
    zero-point motion; peak ≈ 2 n_tot S_zp is the n_tot ≫ 1 form of the same
    relation. A peak of exactly S_zp at Γ_eff = Γ_m is ground-state motion
    and gives n_tot = 0.
    """
    level = 2.0 * zero_point_level(fit.unit, osc, g0)
    ratio = fit.gamma_eff / osc.gamma_m
    n_tot = fit.peak * ratio**2 / level - 0.5
    n_imp = fit.floor / level
    cov = np.asarray(fit.covariance)
    grad = np.array([0.0, 2.0 * fit.peak * ratio / (osc.gamma_m * level), ratio**2 / level, 0.0])
    n_tot_err = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    n_imp_err = fit.std(3) / level
    return OccupancyEstimate(
        n_tot=n_tot,
        n_imp=n_imp,
        n_tot_err=n_tot_err,
        n_imp_err=n_imp_err,
        n_imp_damped=n_imp * ratio,
    )


def phonon_from_spectrum(
    fit: SpectrumFit, osc: OscillatorParams, g0: Optional[float] = None
) -> PhononEstimate:
    """In-loop occupancy n_m + 1/2 ≈ (Γ_eff/Γ_m)(S(Ω_m) + S_imp)/(2 S_zp).

    S(Ω_m) is the fitted value at the center and S_imp the fitted floor. A
    result below zero by more than its uncertainty is flagged as a
    noise-squashing artifact.
    """
    level = 2.0 * zero_point_level(fit.unit, osc, g0)
    k = 1.0 / (level * osc.gamma_m)
    total = fit.peak + 2.0 * fit.floor
    n_m = k * fit.gamma_eff * total - 0.5
    grad = np.array([0.0, k * total, k * fit.gamma_eff, 2.0 * k * fit.gamma_eff])
    cov = np.asarray(fit.covariance)
    uncertainty = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    artifact = n_m + uncertainty < 0.0
    if artifact:
        logger.warning("negative occupancy %.3g from an in-loop spectrum", n_m)
    return PhononEstimate(n_m=n_m, uncertainty=uncertainty, squashing_artifact=artifact)


def tail_occupancy(
    psd: Psd,
    osc: OscillatorParams,
    floor: float,
    band: Band,
    g0: Optional[float] = None,
) -> float:
    """n_tot from the off-resonant thermomechanical tail.

    Each bin gives (S − S_imp)/(2 S_zp) · (Ω − Ω_m)²/(Γ_m/2)²; the band must
    stay many linewidths away from resonance.
    """
    freq, value = psd.select(band)
    if freq.size == 0:
        raise ConfigError(f"band {band} holds no bins")
    detuning = TWO_PI * freq - osc.omega_m
    if np.min(np.abs(detuning)) < 10.0 * osc.gamma_m:
        logger.warning("tail band reaches within 10 linewidths of resonance")
    level = 2.0 * zero_point_level(psd.unit, osc, g0)
    estimates = (value - floor) / level * detuning**2 / (osc.gamma_m / 2.0) ** 2
    return float(np.mean(estimates)) - 0.5


def psd_digest(psd: Psd) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(psd.freq, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(psd.value, dtype="<f8").tobytes())
    return digest.hexdigest()


def write_psd_csv(psd: Psd, path: Union[str, Path]) -> None:
    np.savetxt(
        path,
        np.column_stack([psd.freq, psd.value]),
        fmt="%.12g",
        delimiter=",",
        header="freq_hz,psd",
        comments="",
    )


def read_psd_csv(
    path: Union[str, Path],
    unit: SpectralUnit = SpectralUnit.NORMALIZED,
    n_averages: int = 1,
) -> Psd:
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
    if header != "freq_hz,psd":
        raise ConfigError(f"{path}: expected header 'freq_hz,psd', got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    freq = data[:, 0]
    resolution = float(np.median(np.diff(freq))) if freq.size > 1 else 1.0
    return Psd(
        freq=freq,
        value=data[:, 1],
        resolution=resolution,
        n_averages=n_averages,
        unit=unit,
    )


def write_fit_report(report: FitReport, path: Union[str, Path]) -> None:
    Path(path).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
