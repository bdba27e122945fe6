"""Parameter extraction: g0 from a reference tone or the optical spring, the
mode splitting from resonant transmission, and Γ_m from energy ringdowns.
"""

import hashlib
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, optimize, signal

from .core import (
    TWO_PI,
    CavityParams,
    MeasurementChain,
    OscillatorParams,
    spring_shift,
    transmission,
)
from .engine import Trajectory
from .exceptions import CalibrationError, ConfigError
from .spectral import Band, Psd, SpectralUnit, psd_digest

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

TONE_SIGNIFICANCE = 5.0
BISECTION_TOLERANCE = 1e-6
FAR_DETUNING = 50.0
# filtered forward and backward, so the magnitude response is fourth order
BUTTER_ORDER = 2


class CalibrationTone(BaseModel):
    """Phase-modulation reference tone used to calibrate the frequency axis."""

    beta: float = Field(..., gt=0, description="Phase modulation depth (rad)")
    omega_cal: float = Field(..., gt=0, description="Modulation frequency (rad/s)")
    transfer_ratio: float = Field(
        default=1.0,
        gt=0,
        le=1.5,
        description="|G_Vω(Ω_cal)/G_Vω(Ω_m)| detector transfer ratio",
    )

    model_config = ConfigDict(frozen=True)

    @property
    def frequency_variance(self) -> float:
        """Mean-square frequency modulation (β Ω_cal)²/2 imposed by the tone."""
        return 0.5 * (self.beta * self.omega_cal) ** 2


class CalibrationResult(BaseModel):
    value: float
    uncertainty: float = Field(..., ge=0)
    method: str
    details: Dict[str, Any] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True)


class ModeSplittingResult(BaseModel):
    kappa_0: float
    gamma_split: float
    kappa_0_err: float
    gamma_split_err: float
    residual_rms: float

    model_config = ConfigDict(frozen=True)


class RingdownResult(BaseModel):
    """Energy-decay fit; ``gamma_m`` is the energy e-folding rate (rad/s)."""

    gamma_m: float
    uncertainty: float
    amplitude: float
    offset: float
    n_trajectories: int
    fit_start: float
    fit_stop: float

    model_config = ConfigDict(frozen=True)

    @property
    def efolding_time(self) -> float:
        return 1.0 / self.gamma_m


class CalibrationReport(BaseModel):
    g0_tone: Optional[CalibrationResult] = None
    g0_spring: Optional[CalibrationResult] = None
    mode_splitting: Optional[ModeSplittingResult] = None
    ringdown: Optional[RingdownResult] = None
    input_sha256: Dict[str, str] = Field(default_factory=dict)
    windows: Dict[str, Tuple[float, float]] = Field(default_factory=dict)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _flank_floor(psd: Psd, window: Band) -> Tuple[float, float]:
    lo, hi = window
    width = hi - lo
    below = (psd.freq >= lo - width) & (psd.freq < lo)
    above = (psd.freq > hi) & (psd.freq <= hi + width)
    flanks = psd.value[below | above]
    if flanks.size == 0:
        raise CalibrationError(f"no bins flank the window {window}")
    return float(np.median(flanks)), float(np.std(flanks))


def _excess_area(psd: Psd, window: Band) -> Tuple[float, float, float]:
    freq, value = psd.select(window)
    if freq.size < 2:
        raise CalibrationError(f"window {window} holds fewer than two bins")
    floor, scatter = _flank_floor(psd, window)
    area = float(integrate.trapezoid(value - floor, freq))
    peak = float(np.max(value) - floor)
    # floor scatter carried across the window
    error = scatter * (freq[-1] - freq[0]) / math.sqrt(freq.size)
    return area, peak, error


def calibrate_g0(
    psd: Psd,
    tone: CalibrationTone,
    n_th: float,
    peak_window: Band,
    tone_window: Band,
) -> CalibrationResult:
    """g0 from the ratio of the mechanical and reference-tone areas.

    g0 = (βΩ_cal/2)·sqrt(⟨V²⟩_m / (n_th ⟨V²⟩_cal))·|G_Vω(Ω_cal)/G_Vω(Ω_m)|,
    with each area integrated above a floor taken from flanking bands.

    Raises:
        ConfigError: If the windows overlap.
        CalibrationError: If the tone or peak does not rise above the floor.
    """
    if peak_window[0] >= peak_window[1] or tone_window[0] >= tone_window[1]:
        raise ConfigError("windows must be given as (low, high)")
    if peak_window[0] <= tone_window[1] and tone_window[0] <= peak_window[1]:
        raise ConfigError(f"windows {peak_window} and {tone_window} overlap")
    if n_th <= 0:
        raise ConfigError("n_th must be positive")

    tone_area, tone_peak, tone_err = _excess_area(psd, tone_window)
    _, tone_scatter = _flank_floor(psd, tone_window)
    if tone_area <= 0.0 or tone_peak <= TONE_SIGNIFICANCE * tone_scatter:
        raise CalibrationError("calibration tone not found above the floor")
    peak_area, _, peak_err = _excess_area(psd, peak_window)
    if peak_area <= 0.0:
        raise CalibrationError("mechanical peak not found above the floor")

    ratio = peak_area / (n_th * tone_area)
    g0 = 0.5 * tone.beta * tone.omega_cal * math.sqrt(ratio) * tone.transfer_ratio
    relative = 0.5 * math.hypot(peak_err / peak_area, tone_err / tone_area)
    logger.info("tone calibration: g0 = 2π·%.4g Hz", g0 / TWO_PI)
    return CalibrationResult(
        value=g0,
        uncertainty=g0 * relative,
        method="tone",
        details={
            "peak_area": peak_area,
            "tone_area": tone_area,
            "input_sha256": psd_digest(psd),
        },
    )


def _red_dip(cav: CavityParams) -> float:
    span = cav.gamma_split / 2.0 + 2.0 * cav.kappa
    result = optimize.minimize_scalar(
        lambda d: float(transmission(cav, [d])[0]),
        bounds=(-span, 0.0),
        method="bounded",
        options={"xatol": BISECTION_TOLERANCE * cav.kappa},
    )
    return float(result.x)


def detuning_from_transmission(cav: CavityParams, measured: float) -> float:
    """Red-side detuning (Δ < 0) at which the cavity transmits ``measured``.

    Solved by bisection on the monotone branch between far red detuning and
    the red transmission dip.

    Raises:
        CalibrationError: If ``measured`` is not reached on that branch.
    """
    dip = _red_dip(cav)
    far = -FAR_DETUNING * cav.kappa
    t_dip = float(transmission(cav, [dip])[0])
    t_far = float(transmission(cav, [far])[0])
    if t_dip - 1e-8 <= measured < t_dip:
        return dip
    if not t_dip <= measured <= t_far:
        raise CalibrationError(
            f"ambiguous branch: transmission {measured:.6g} outside the monotone "
            f"red branch [{t_dip:.6g}, {t_far:.6g}]"
        )
    return float(
        optimize.bisect(
            lambda d: float(transmission(cav, [d])[0]) - measured,
            far,
            dip,
            xtol=BISECTION_TOLERANCE * cav.kappa,
        )
    )


def g0_from_spring(
    measurements: Sequence[Tuple[float, float]],
    cav: CavityParams,
    chain: MeasurementChain,
) -> CalibrationResult:
    """g0 from optical-spring shifts measured at red-detuned transmissions.

    ``measurements`` holds (transmission, spring shift in rad/s) pairs. The
    shift is linear in g0², so g0² follows from linear least squares against
    the unit-coupling model; resonant points carry no weight.

    Raises:
        CalibrationError: With fewer than five distinct detunings.
    """
    if len(measurements) < 5:
        raise CalibrationError("g0_from_spring needs at least 5 measurements")
    detunings = np.array(
        [detuning_from_transmission(cav, t) for t, _ in measurements]
    )
    if np.unique(np.round(detunings / (BISECTION_TOLERANCE * cav.kappa * 10))).size < 5:
        raise CalibrationError("measurements span fewer than 5 distinct detunings")
    shifts = np.array([s for _, s in measurements], dtype=float)
    unit = spring_shift(cav, chain.model_copy(update={"g0": 1.0}), detunings)
    norm = float(unit @ unit)
    if norm == 0.0:
        raise CalibrationError("spring model vanishes at every measured detuning")
    g0_squared = float(unit @ shifts) / norm
    if g0_squared <= 0.0:
        raise CalibrationError("measured shifts have the wrong sign for red detuning")
    residual = shifts - g0_squared * unit
    dof = max(len(shifts) - 1, 1)
    g0_squared_err = math.sqrt(float(residual @ residual) / dof / norm)
    g0 = math.sqrt(g0_squared)
    return CalibrationResult(
        value=g0,
        uncertainty=g0_squared_err / (2.0 * g0),
        method="spring",
        details={"detunings": detunings.tolist()},
    )


def spring_points_from_csv(path: Union[str, Path]) -> List[Tuple[float, float]]:
    """Reads ``transmission,spring_shift_hz`` rows; shifts converted to rad/s."""
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
    if header != "transmission,spring_shift_hz":
        raise ConfigError(
            f"{path}: expected header 'transmission,spring_shift_hz', got {header!r}"
        )
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [(float(t), TWO_PI * float(s)) for t, s in data]


def resonant_transmission(kappa: FloatArray, kappa_0: float, gamma_split: float) -> FloatArray:
    """T(Δ = 0) = (1 − 2η_c/(1 + γ²/κ²))² with η_c = (κ − κ₀)/κ."""
    kappa = np.asarray(kappa, dtype=float)
    eta = (kappa - kappa_0) / kappa
    return np.asarray((1.0 - 2.0 * eta / (1.0 + (gamma_split / kappa) ** 2)) ** 2)


def fit_mode_splitting(points: Sequence[Tuple[float, float]]) -> ModeSplittingResult:
    """Fits κ₀ and γ to resonant transmission measured at several total κ.

    Raises:
        CalibrationError: With fewer than four points, repeated κ values or
            data that cannot constrain the model.
    """
    if len(points) < 4:
        raise CalibrationError("fit_mode_splitting needs at least 4 points")
    kappa = np.array([k for k, _ in points], dtype=float)
    data = np.array([t for _, t in points], dtype=float)
    if np.unique(kappa).size < 4:
        raise CalibrationError("fit_mode_splitting needs 4 distinct kappa values")
    if np.all(np.abs(1.0 - data) < 1e-9):
        raise CalibrationError("degenerate data: transmission is 1 at every point")

    scale = float(np.median(kappa))
    k_min = float(kappa.min())

    def residuals(x: FloatArray) -> FloatArray:
        return resonant_transmission(kappa, scale * x[0], scale * x[1]) - data

    best = None
    for k0 in np.linspace(0.02, 1.0, 50) * k_min:
        for gamma in np.linspace(0.0, 2.0, 41) * scale:
            r = resonant_transmission(kappa, k0, gamma) - data
            cost = float(r @ r)
            if best is None or cost < best[2]:
                best = (k0, gamma, cost)
    assert best is not None

    result = optimize.least_squares(
        residuals,
        np.array([best[0] / scale, best[1] / scale]),
        bounds=([1e-9, 0.0], [k_min / scale, np.inf]),
        method="trf",
        xtol=1e-12,
        ftol=1e-15,
        gtol=1e-15,
    )
    if result.status == 0:
        raise CalibrationError("mode-splitting fit did not converge")
    jac = result.jac
    dof = len(points) - 2
    covariance = np.linalg.pinv(jac.T @ jac) * float(2.0 * result.cost) / dof
    errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None)) * scale
    return ModeSplittingResult(
        kappa_0=float(result.x[0] * scale),
        gamma_split=float(result.x[1] * scale),
        kappa_0_err=float(errors[0]),
        gamma_split_err=float(errors[1]),
        residual_rms=float(np.sqrt(np.mean(result.fun**2))),
    )


def lock_in(
    traj: Trajectory, demod_freq: float, bandwidth: float
) -> Tuple[FloatArray, NDArray[np.complex128]]:
    """Digital lock-in: mix the position with e^{−iω_d t} and low-pass.

    Returns the sample times and the complex amplitude, scaled so that
    |z| is the oscillation amplitude. The low-pass is a zero-phase
    second-order Butterworth run forward and backward: a fourth-order
    magnitude roll-off, down by half at ``bandwidth`` (Hz).
    """
    fs = traj.sample_rate
    if not 0.0 < bandwidth < fs / 2.0:
        raise ConfigError(f"bandwidth {bandwidth} Hz must lie below Nyquist {fs / 2} Hz")
    if TWO_PI * bandwidth >= demod_freq:
        raise ConfigError("lock-in bandwidth must be well below the demodulation frequency")
    sos = signal.butter(BUTTER_ORDER, bandwidth, btype="low", fs=fs, output="sos")
    mixed = 2.0 * traj.u * np.exp(-1j * demod_freq * traj.t)
    real = signal.sosfiltfilt(sos, mixed.real)
    imag = signal.sosfiltfilt(sos, mixed.imag)
    return traj.t, real + 1j * imag


def _decay(t: FloatArray, amplitude: float, rate: float, offset: float) -> FloatArray:
    return np.asarray(amplitude * np.exp(-rate * t) + offset)


def fit_ringdown(
    trajectories: Union[Trajectory, Sequence[Trajectory]],
    demod_freq: float,
    bandwidth: float,
    start_time: Optional[float] = None,
    stop_time: Optional[float] = None,
    settle: Optional[float] = None,
) -> RingdownResult:
    """Γ_m from the energy envelope |z|² averaged over one or more ringdowns.

    The fit A·e^{−Γ(t − t₀)} + B starts ``settle`` after ``start_time``
    (default: the envelope maximum) and stops ``settle`` before the record
    end, keeping clear of the filter transients. A log-linear fit seeds it.

    Raises:
        CalibrationError: If the envelope does not decay ("drive not
            shuttered / unstable").
    """
    runs = [trajectories] if isinstance(trajectories, Trajectory) else list(trajectories)
    if not runs:
        raise ConfigError("fit_ringdown needs at least one trajectory")
    t = runs[0].t
    energy = np.zeros_like(t)
    for run in runs:
        if len(run.t) != len(t):
            raise ConfigError("ensemble trajectories must share one time grid")
        _, z = lock_in(run, demod_freq, bandwidth)
        energy += np.abs(z) ** 2
    energy /= len(runs)

    pad = 3.0 / bandwidth if settle is None else settle
    t0 = float(t[int(np.argmax(energy))]) if start_time is None else start_time
    t1 = float(t[-1]) if stop_time is None else stop_time
    mask = (t >= t0 + pad) & (t <= t1 - pad)
    if np.count_nonzero(mask) < 10:
        raise CalibrationError("ringdown window holds fewer than 10 samples")
    tau = t[mask] - t[mask][0]
    envelope = energy[mask]

    chunks = np.array_split(envelope, 10)
    if np.mean(chunks[-1]) >= np.mean(chunks[0]):
        raise CalibrationError("drive not shuttered / unstable: envelope does not decay")

    positive = envelope > 0
    slope, intercept = np.polyfit(tau[positive], np.log(envelope[positive]), 1)
    if slope >= 0.0:
        raise CalibrationError("drive not shuttered / unstable: envelope does not decay")
    try:
        params, covariance = optimize.curve_fit(
            _decay,
            tau,
            envelope,
            p0=(math.exp(intercept), -slope, 0.0),
            maxfev=10000,
        )
    except RuntimeError as exc:
        raise CalibrationError(f"ringdown fit failed: {exc}") from exc
    amplitude, rate, offset = (float(p) for p in params)
    if rate <= 0.0:
        raise CalibrationError("drive not shuttered / unstable: fitted decay rate ≤ 0")
    uncertainty = float(np.sqrt(max(covariance[1, 1], 0.0)))
    if not math.isfinite(uncertainty):
        uncertainty = 0.0
    return RingdownResult(
        gamma_m=rate,
        uncertainty=uncertainty,
        amplitude=amplitude,
        offset=offset,
        n_trajectories=len(runs),
        fit_start=float(t[mask][0]),
        fit_stop=float(t[mask][-1]),
    )


def trajectory_digest(traj: Trajectory) -> str:
    data = np.ascontiguousarray(traj.columns(), dtype="<f8")
    return hashlib.sha256(data.tobytes()).hexdigest()


def mode_splitting_points_from_csv(path: Union[str, Path]) -> List[Tuple[float, float]]:
    """Reads ``kappa_hz,transmission`` rows; κ converted to rad/s."""
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
    if header != "kappa_hz,transmission":
        raise ConfigError(f"{path}: expected header 'kappa_hz,transmission', got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [(TWO_PI * float(k), float(t)) for k, t in data]


def synthetic_tone_psd(
    osc: OscillatorParams,
    g0: float,
    n_th: float,
    tone: CalibrationTone,
    resolution: float = 1.0,
    detector_gain: float = 1.0,
    floor_ratio: float = 1e-3,
    span_linewidths: float = 600.0,
) -> Psd:
    """Photocurrent PSD (V²/Hz) with a thermal peak, a reference tone and a floor.

    Only two bands are kept: ±``span_linewidths`` linewidths around the
    mechanical peak and ±30 bins around the tone.
    """
    f_m = osc.omega_m / TWO_PI
    linewidth = osc.gamma_m / TWO_PI
    f_cal = tone.omega_cal / TWO_PI
    half = span_linewidths * linewidth
    tone_offsets = resolution * np.arange(-30, 31)
    if f_m + half >= f_cal + tone_offsets[0]:
        raise ConfigError("tone frequency must lie above the mechanical band")
    band_m = f_m + np.arange(-half, half, resolution)
    freq = np.concatenate([band_m, f_cal + tone_offsets])

    mech_area = 2.0 * g0**2 * n_th * detector_gain**2
    tone_area = tone.frequency_variance * (tone.transfer_ratio * detector_gain) ** 2
    mech = mech_area * 2.0 / (math.pi * linewidth) / (1.0 + (2.0 * (freq - f_m) / linewidth) ** 2)
    reference = (
        tone_area
        / (math.sqrt(TWO_PI) * resolution)
        * np.exp(-0.5 * ((freq - f_cal) / resolution) ** 2)
    )
    floor = floor_ratio * mech_area * 2.0 / (math.pi * linewidth)
    return Psd(
        freq=freq,
        value=mech + reference + floor,
        resolution=resolution,
        unit=SpectralUnit.VOLTAGE,
    )


def synthetic_spring_points(
    cav: CavityParams, chain: MeasurementChain, detunings: FloatArray
) -> List[Tuple[float, float]]:
    """(transmission, spring shift) pairs at the given red detunings."""
    detunings = np.asarray(detunings, dtype=float)
    return list(
        zip(
            transmission(cav, detunings).tolist(),
            spring_shift(cav, chain, detunings).tolist(),
        )
    )


def synthetic_splitting_points(
    kappa_0: float, gamma_split: float, kappas: FloatArray
) -> List[Tuple[float, float]]:
    kappas = np.asarray(kappas, dtype=float)
    return list(zip(kappas.tolist(), resonant_transmission(kappas, kappa_0, gamma_split).tolist()))
