"""Stochastic time-domain simulation of the feedback-cooled oscillator.

The normalized position u = x/x_zp obeys

    ü + Γ_m u̇ + Ω_m² u = f_th + f_ba + f_fb_noise + f_fb

with white force noises of intensity 2Γ_mΩ_m²(2n + 1) (thermal) and
2Γ_mΩ_m²·2n (back-action and actuator channels), and a measurement record
y = u + w where w is white with single-sided density 8 n_imp / Γ_m.
"""

import logging
import math
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from pathlib import Path
from typing import Deque, List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import signal

from .core import FeedbackSettings, NoiseBudget, OscillatorParams
from .exceptions import ConfigError, LoopUnstableError, SimulationError
from .integrators import Discretization, IntegratorFactory

logger = logging.getLogger(__name__)

MAX_STEP_PHASE = 0.05
WARN_STEP_PHASE = 0.02
INSTABILITY_FACTOR = 1e6

TRAJECTORY_COLUMNS = ("t", "u", "y", "f_fb")
_BINARY_MAGIC = b"OPTOCOOL"
_BINARY_VERSION = 1
_BINARY_HEADER = struct.Struct("<8sIIQdd24s")

FloatArray = NDArray[np.float64]


class NoiseChannel(IntEnum):
    """Independent noise sources, each with its own random stream.

    Attributes:
        THERMAL: Thermal Langevin force including the zero-point term.
        BACKACTION: Quantum back-action force.
        EXTRANEOUS_BACKACTION: Excess back-action force.
        ACTUATOR: Feedback actuator noise.
        IMPRECISION: Measurement imprecision added to the record.
    """

    THERMAL = 0
    BACKACTION = 1
    EXTRANEOUS_BACKACTION = 2
    ACTUATOR = 3
    IMPRECISION = 4


class SimConfig(BaseModel):
    """Settings for one batch of trajectories."""

    osc: OscillatorParams = Field(..., description="Oscillator parameters")
    budget: NoiseBudget = Field(..., description="Occupancies setting noise strengths")
    fb: FeedbackSettings = Field(
        default_factory=FeedbackSettings, description="Feedback loop"
    )
    dt: float = Field(..., gt=0, description="Time step (s)")
    duration: float = Field(..., gt=0, description="Total simulated time (s)")
    burn_in: float = Field(default=0.0, ge=0, description="Discarded initial time (s)")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Root random seed")
    n_trajectories: int = Field(default=1, ge=1, description="Number of trajectories")
    integrator: str = Field(default="exact", description="Discretization scheme")
    noise: bool = Field(default=True, description="Enable all stochastic channels")
    initial_u: float = Field(default=0.0, description="Initial normalized position")
    initial_v: float = Field(default=0.0, description="Initial normalized velocity")
    threads: int = Field(default=1, ge=1, description="Worker threads")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_step(self) -> "SimConfig":
        phase = self.dt * self.osc.omega_m
        if phase > MAX_STEP_PHASE:
            raise ValueError(
                f"dt·Ω_m = {phase:.3g} exceeds {MAX_STEP_PHASE} "
                "(at least ~125 samples per mechanical period)"
            )
        if phase > WARN_STEP_PHASE:
            logger.warning("dt·Ω_m = %.3g is above %g", phase, WARN_STEP_PHASE)
        if self.burn_in >= self.duration:
            raise ValueError("burn_in must be shorter than duration")
        if self.integrator.lower() not in IntegratorFactory.get_available_integrators():
            raise ValueError(f"Unknown integrator: {self.integrator}")
        return self

    @property
    def gamma_eff(self) -> float:
        return self.fb.gamma_eff(self.osc.gamma_m)

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def n_burn(self) -> int:
        return int(round(self.burn_in / self.dt))

    def statistics_issues(self) -> List[str]:
        """Shortfalls against the record-length and burn-in requirements."""
        issues = []
        linewidth_time = 1.0 / self.gamma_eff
        if self.duration - self.burn_in < 20.0 * linewidth_time:
            issues.append(
                f"duration - burn_in = {self.duration - self.burn_in:.4g} s is "
                f"shorter than 20/Γ_eff = {20.0 * linewidth_time:.4g} s"
            )
        if self.burn_in < 10.0 * linewidth_time:
            issues.append(
                f"burn_in = {self.burn_in:.4g} s is shorter than "
                f"10/Γ_eff = {10.0 * linewidth_time:.4g} s"
            )
        return issues


class Trajectory(BaseModel):
    """Uniformly sampled simulation output.

    Attributes:
        t: Sample times (s).
        u: True normalized position x/x_zp.
        y: Measurement record u + imprecision noise.
        f_fb: Applied feedback force (normalized units, 1/s²).
    """

    t: FloatArray
    u: FloatArray
    y: FloatArray
    f_fb: FloatArray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def _check_sampling(self) -> "Trajectory":
        n = len(self.t)
        if not (len(self.u) == len(self.y) == len(self.f_fb) == n):
            raise ValueError("trajectory columns must have equal lengths")
        if n > 2:
            steps = np.diff(self.t)
            if not np.allclose(steps, steps[0], rtol=1e-4):
                raise ValueError("trajectory must be uniformly sampled")
        return self

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    def columns(self) -> FloatArray:
        return np.column_stack([self.t, self.u, self.y, self.f_fb])

    def to_csv(self, path: Union[str, Path]) -> None:
        np.savetxt(
            path,
            self.columns(),
            fmt="%.12g",
            delimiter=",",
            header=",".join(TRAJECTORY_COLUMNS),
            comments="",
        )

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Trajectory":
        with open(path, encoding="utf-8") as handle:
            header = handle.readline().strip()
        if header != ",".join(TRAJECTORY_COLUMNS):
            raise ConfigError(f"{path}: expected header 't,u,y,f_fb', got {header!r}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(t=data[:, 0], u=data[:, 1], y=data[:, 2], f_fb=data[:, 3])

    def to_binary(self, path: Union[str, Path]) -> None:
        """Little-endian float64, column-major, after a 64-byte header."""
        names = ",".join(TRAJECTORY_COLUMNS).encode("ascii")
        t0 = float(self.t[0]) if len(self.t) else 0.0
        dt = self.dt if len(self.t) > 1 else 0.0
        header = _BINARY_HEADER.pack(
            _BINARY_MAGIC, _BINARY_VERSION, 4, len(self.t), dt, t0, names
        )
        body = np.stack([self.t, self.u, self.y, self.f_fb]).astype("<f8")
        with open(path, "wb") as handle:
            handle.write(header)
            handle.write(body.tobytes(order="C"))

    @classmethod
    def from_binary(cls, path: Union[str, Path]) -> "Trajectory":
        raw = Path(path).read_bytes()
        magic, version, n_columns, n_samples, _, _, _ = _BINARY_HEADER.unpack_from(raw)
        if magic != _BINARY_MAGIC or version != _BINARY_VERSION or n_columns != 4:
            raise ConfigError(f"{path}: not an optocool trajectory file")
        body = np.frombuffer(raw, dtype="<f8", offset=_BINARY_HEADER.size)
        body = body.reshape(n_columns, n_samples)
        return cls(t=body[0].copy(), u=body[1].copy(), y=body[2].copy(), f_fb=body[3].copy())


class FeedbackFilter:
    """Bandpass followed by an integer-sample delay line.

    The bandpass is a second-order resonator with unit gain and zero phase at
    its center, so the small-signal transfer is

        H(Ω) = B(e^{iΩ/f_s}) · e^{−iΩ n / f_s},   n = round(τ f_s).

    With τ = 3π/(2Ω_m) the output at Ω_m leads the input by π/2, the phase
    of a derivative filter.
    """

    def __init__(self, fb: FeedbackSettings, sample_rate: float, omega_m: float):
        center = fb.bandpass_center if fb.bandpass_center is not None else omega_m
        width = fb.bandpass_width if fb.bandpass_width is not None else omega_m / 2.0
        nyquist = math.pi * sample_rate
        if center >= nyquist:
            raise ConfigError(
                f"bandpass center {center:.6g} rad/s is not below Nyquist {nyquist:.6g}"
            )
        self.delay_samples = int(round(fb.delay * sample_rate))
        if self.delay_samples < 1:
            raise ConfigError(
                f"loop delay {fb.delay:.4g} s is shorter than one sample "
                f"({1.0 / sample_rate:.4g} s)"
            )
        self.sample_rate = sample_rate
        self.b, self.a = signal.iirpeak(
            center / (2.0 * math.pi), Q=center / width, fs=sample_rate
        )
        self.reset()

    def reset(self) -> None:
        self._s1 = 0.0
        self._s2 = 0.0
        self._line: Deque[float] = deque([0.0] * self.delay_samples)

    def process(self, sample: float) -> float:
        """Pushes one input sample and returns one output sample."""
        b0, b1, b2 = self.b
        _, a1, a2 = self.a
        out = b0 * sample + self._s1
        self._s1 = b1 * sample - a1 * out + self._s2
        self._s2 = b2 * sample - a2 * out
        self._line.append(out)
        return self._line.popleft()

    def apply(self, samples: FloatArray) -> FloatArray:
        """Filters a whole record from rest."""
        filtered = signal.lfilter(self.b, self.a, np.asarray(samples, dtype=float))
        delayed = np.zeros_like(filtered)
        delayed[self.delay_samples :] = filtered[: len(filtered) - self.delay_samples]
        return delayed

    def transfer(self, omega: FloatArray) -> NDArray[np.complex128]:
        omega = np.asarray(omega, dtype=float)
        _, response = signal.freqz(
            self.b, self.a, worN=omega / (2.0 * math.pi), fs=self.sample_rate
        )
        lag = np.exp(-1j * omega * self.delay_samples / self.sample_rate)
        return np.asarray(response * lag)


def feedback_filter(
    fb: FeedbackSettings, sample_rate: float, omega_m: Optional[float] = None
) -> FeedbackFilter:
    """Builds the causal loop filter for ``fb`` at ``sample_rate`` (Hz)."""
    if omega_m is None:
        if fb.bandpass_center is None:
            raise ConfigError("bandpass_center or omega_m is required")
        omega_m = fb.bandpass_center
    return FeedbackFilter(fb, sample_rate, omega_m)


def _stream(seed: int, index: int, channel: NoiseChannel) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(index, int(channel)))
    return np.random.Generator(np.random.Philox(sequence))


def _force_intensities(config: SimConfig) -> List[Tuple[NoiseChannel, float]]:
    budget = config.budget
    base = 2.0 * config.osc.gamma_m * config.osc.omega_m**2
    return [
        (NoiseChannel.THERMAL, base * (2.0 * budget.n_th + 1.0)),
        (NoiseChannel.BACKACTION, base * 2.0 * budget.n_ba),
        (NoiseChannel.EXTRANEOUS_BACKACTION, base * 2.0 * budget.n_ba_ex),
        (NoiseChannel.ACTUATOR, base * 2.0 * budget.n_fb),
    ]


def _process_noise(
    config: SimConfig, index: int, n_steps: int, disc: Discretization
) -> FloatArray:
    """State-noise increments (n_steps, 2) summed over force channels."""
    combined = np.zeros((n_steps, 2))
    if not config.noise:
        return combined
    for channel, intensity in _force_intensities(config):
        if intensity > 0.0:
            draws = _stream(config.seed, index, channel).standard_normal((n_steps, 2))
            combined += math.sqrt(intensity) * draws
    return np.asarray(combined @ disc.noise_factor.T)


def _imprecision(config: SimConfig, index: int, n_steps: int) -> FloatArray:
    n_imp = config.budget.n_imp
    if not config.noise or n_imp == 0.0:
        return np.zeros(n_steps)
    if not math.isfinite(n_imp):
        raise SimulationError("imprecision is infinite (no probe light)")
    sigma = math.sqrt(4.0 * n_imp / (config.osc.gamma_m * config.dt))
    rng = _stream(config.seed, index, NoiseChannel.IMPRECISION)
    return np.asarray(sigma * rng.standard_normal(n_steps))


def _instability_bound(config: SimConfig, drive_amplitude: float = 0.0) -> float:
    scale = max(
        math.sqrt(2.0 * config.budget.force_occupancy + 1.0),
        abs(config.initial_u),
        abs(config.initial_v) / config.osc.omega_m,
        drive_amplitude / (config.osc.omega_m * config.osc.gamma_m),
    )
    return INSTABILITY_FACTOR * scale


def _uses_linear_path(config: SimConfig) -> bool:
    return (
        (config.fb.loop == "velocity" or config.fb.gain == 0.0)
        and config.initial_u == 0.0
        and config.initial_v == 0.0
    )


def _discretize(config: SimConfig, gamma: float) -> Discretization:
    integrator = IntegratorFactory.create_integrator(config.integrator)
    return integrator.discretize(config.osc.omega_m, gamma, config.dt)


def _response(
    disc: Discretization, input_vector: FloatArray, sequence: FloatArray
) -> Tuple[FloatArray, FloatArray]:
    """Zero-state (u, v) response of the step map to one scalar input."""
    b = np.asarray(input_vector, dtype=float).reshape(2, 1)
    outputs = []
    for row in (np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])):
        num, den = signal.ss2tf(disc.phi, b, row, np.zeros((1, 1)))
        outputs.append(signal.lfilter(num[0], den, sequence))
    return outputs[0], outputs[1]


def _run_linear(config: SimConfig, index: int) -> Trajectory:
    """Velocity-feedback loop solved as a linear filter of the noise inputs."""
    n = config.n_steps
    gamma_fb = config.fb.gamma_fb(config.osc.gamma_m)
    disc = _discretize(config, config.gamma_eff)
    noise = _process_noise(config, index, n, disc)
    w = _imprecision(config, index, n)
    w_rate = np.diff(w, prepend=w[0]) / config.dt

    u = np.zeros(n)
    v = np.zeros(n)
    # unit-vector inputs carry the pre-mixed state noise
    for column in range(2):
        if noise[:, column].any():
            du, dv = _response(disc, np.eye(2)[column], noise[:, column])
            u += du
            v += dv
    if gamma_fb > 0.0 and w.any():
        du, dv = _response(disc, disc.force_gain, -gamma_fb * w_rate)
        u += du
        v += dv

    bound = _instability_bound(config)
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > bound:
        raise LoopUnstableError("loop unstable (gain/delay mismatch)")
    f_fb = -gamma_fb * (v + w_rate)
    return _trim(config, u, u + w, f_fb)


def _run_stepping(
    config: SimConfig,
    index: int,
    drive_freq: float = 0.0,
    drive_amplitude: float = 0.0,
    drive_off_time: float = 0.0,
    keep_burn_in: bool = False,
) -> Trajectory:
    """Explicit step loop for delay-line feedback, drives and initial states."""
    n = config.n_steps
    dt = config.dt
    velocity_loop = config.fb.loop == "velocity"
    gamma_fb = config.fb.gamma_fb(config.osc.gamma_m)
    damping = config.gamma_eff if velocity_loop else config.osc.gamma_m
    disc = _discretize(config, damping)
    noise = _process_noise(config, index, n, disc)
    w = _imprecision(config, index, n)

    loop_filter: Optional[FeedbackFilter] = None
    if not velocity_loop and config.fb.gain > 0.0:
        loop_filter = FeedbackFilter(config.fb, config.sample_rate, config.osc.omega_m)
    loop_scale = gamma_fb * config.osc.omega_m

    (p11, p12), (p21, p22) = disc.phi.tolist()
    g1, g2 = disc.force_gain.tolist()
    n1 = noise[:, 0].tolist()
    n2 = noise[:, 1].tolist()
    w_samples = w.tolist()
    bound = _instability_bound(config, drive_amplitude)
    drive_steps = int(round(drive_off_time / dt)) if drive_amplitude else 0

    u = np.empty(n)
    y = np.empty(n)
    f_fb = np.empty(n)
    pos, vel = config.initial_u, config.initial_v
    previous_w = w_samples[0] if n else 0.0
    for k in range(n):
        u[k] = pos
        record = pos + w_samples[k]
        y[k] = record
        if loop_filter is not None:
            force = -loop_scale * loop_filter.process(record)
            f_fb[k] = force
        elif velocity_loop and gamma_fb > 0.0:
            # damping of the true velocity is already inside phi
            force = -gamma_fb * (w_samples[k] - previous_w) / dt
            previous_w = w_samples[k]
            f_fb[k] = force - gamma_fb * vel
        else:
            force = 0.0
            f_fb[k] = 0.0
        if k < drive_steps:
            force += drive_amplitude * math.cos(drive_freq * k * dt)
        pos, vel = (
            p11 * pos + p12 * vel + g1 * force + n1[k],
            p21 * pos + p22 * vel + g2 * force + n2[k],
        )
        if abs(pos) > bound or not math.isfinite(pos):
            raise LoopUnstableError("loop unstable (gain/delay mismatch)")
    if keep_burn_in:
        t = np.arange(n) * dt
        return Trajectory(t=t, u=u, y=y, f_fb=f_fb)
    return _trim(config, u, y, f_fb)


def _trim(config: SimConfig, u: FloatArray, y: FloatArray, f_fb: FloatArray) -> Trajectory:
    start = config.n_burn
    t = np.arange(start, len(u)) * config.dt
    return Trajectory(t=t, u=u[start:], y=y[start:], f_fb=f_fb[start:])


def simulate(config: SimConfig) -> List[Trajectory]:
    """Runs ``config.n_trajectories`` independent trajectories.

    Trajectory ``i`` draws every noise channel from a counter-based stream
    keyed by (seed, i, channel), so results are reproducible and independent
    of thread scheduling. Output order follows the trajectory index.

    Raises:
        LoopUnstableError: If |u| exceeds 10⁶·sqrt(2 n_tot + 1).
    """
    for issue in config.statistics_issues():
        logger.warning(issue)
    if _uses_linear_path(config):
        worker = _run_linear
    else:
        worker = _run_stepping
    indices = range(config.n_trajectories)
    if config.threads == 1:
        return [worker(config, i) for i in indices]
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        return list(pool.map(lambda i: worker(config, i), indices))


def default_drive_amplitude(config: SimConfig) -> float:
    """Drive force giving a resonant amplitude 100× the thermal r.m.s. amplitude."""
    thermal = math.sqrt(2.0 * config.budget.force_occupancy + 1.0)
    return 100.0 * thermal * config.osc.omega_m * config.gamma_eff


def simulate_ringdown(
    config: SimConfig,
    drive_freq: float,
    drive_off_time: float,
    drive_amplitude: Optional[float] = None,
    index: int = 0,
) -> Trajectory:
    """Coherent drive until ``drive_off_time``, then free decay.

    The returned trajectory starts at t = 0 and keeps the driven segment.
    """
    if abs(drive_freq - config.osc.omega_m) > 0.1 * config.osc.omega_m:
        logger.warning(
            "drive at %.6g rad/s is far from Ω_m = %.6g rad/s",
            drive_freq,
            config.osc.omega_m,
        )
    if drive_off_time > config.duration:
        raise ConfigError("drive_off_time lies beyond the simulated duration")
    amplitude = default_drive_amplitude(config) if drive_amplitude is None else drive_amplitude
    return _run_stepping(
        config,
        index,
        drive_freq=drive_freq,
        drive_amplitude=amplitude,
        drive_off_time=drive_off_time,
        keep_burn_in=True,
    )


def simulate_ringdown_ensemble(
    config: SimConfig,
    drive_freq: float,
    drive_off_time: float,
    drive_amplitude: Optional[float] = None,
) -> List[Trajectory]:
    """``config.n_trajectories`` ringdowns with independent noise."""

    def run(i: int) -> Trajectory:
        return simulate_ringdown(config, drive_freq, drive_off_time, drive_amplitude, i)

    indices = range(config.n_trajectories)
    if config.threads == 1:
        return [run(i) for i in indices]
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        return list(pool.map(run, indices))
