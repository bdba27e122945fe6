"""Scenario files: INI parsing, environment overrides and validation.

Scenario files use Hz, W, K, s and m. Everything is converted to angular
units here, so the rest of the package never sees an ordinary frequency
except on a PSD frequency axis.
"""

import configparser
import hashlib
import json
import logging
import math
import os
from importlib import resources
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    model_validator,
)

from .core import (
    TWO_PI,
    CavityParams,
    FeedbackSettings,
    MeasurementChain,
    NoiseBudget,
    OscillatorParams,
    budget_from_occupancies,
    effective_budget,
    noise_budget,
    readout_efficiency,
)
from .engine import SimConfig
from .exceptions import ConfigError
from .spectral import SpectralUnit

logger = logging.getLogger(__name__)

ENV_PREFIX = "OPTOCOOL__"
XI_TOLERANCE = 0.05

Mode = Literal[
    "analytic-budget", "simulate", "fit", "calibrate", "cooling-sweep", "ringdown"
]


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


FloatList = Annotated[List[float], BeforeValidator(_split_list)]
Window = Annotated[Tuple[float, float], BeforeValidator(_split_list)]


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ScenarioSection(_Section):
    name: str
    mode: Mode
    seed: int = Field(default=0, ge=0, lt=2**64)
    description: str = ""


class OscillatorSection(_Section):
    units: Literal["physical", "scaled"] = "physical"
    frequency_hz: Optional[float] = Field(default=None, gt=0)
    linewidth_hz: Optional[float] = Field(default=None, gt=0)
    mass_kg: float = Field(default=1e-12, gt=0)
    temperature_k: float = Field(default=0.0, ge=0)
    x_zp_m: Optional[float] = Field(default=None, gt=0)
    gamma_ratio: float = Field(default=1e-3, gt=0)

    def build(self) -> OscillatorParams:
        if self.units == "scaled":
            return OscillatorParams.scaled(self.gamma_ratio)
        if self.frequency_hz is None or self.linewidth_hz is None:
            raise ConfigError("oscillator.frequency_hz and oscillator.linewidth_hz are required")
        return OscillatorParams.from_hz(
            self.frequency_hz,
            self.linewidth_hz,
            mass=self.mass_kg,
            temperature=self.temperature_k,
            x_zp=self.x_zp_m,
        )


class CavitySection(_Section):
    kappa_0_hz: float = Field(..., gt=0)
    kappa_ex_hz: float = Field(..., ge=0)
    splitting_hz: float = Field(default=0.0, ge=0)
    detuning_hz: float = 0.0
    wavelength_m: float = Field(default=775e-9, gt=0)

    def build(self) -> CavityParams:
        return CavityParams(
            kappa_0=TWO_PI * self.kappa_0_hz,
            kappa_ex=TWO_PI * self.kappa_ex_hz,
            gamma_split=TWO_PI * self.splitting_hz,
            detuning=TWO_PI * self.detuning_hz,
            wavelength=self.wavelength_m,
        )


class ChainSection(_Section):
    g0_hz: float = Field(..., gt=0)
    eta_d: float = Field(default=1.0, gt=0, le=1)
    power_w: float = Field(default=0.0, ge=0)
    c0_extraneous: float = Field(default=0.0, ge=0)
    n_imp_extraneous: float = Field(default=0.0, ge=0)
    n_fb: float = Field(default=0.0, ge=0)
    taper_throughput: float = Field(default=1.0, gt=0, le=1)

    def build(self) -> MeasurementChain:
        return MeasurementChain(
            g0=TWO_PI * self.g0_hz,
            eta_d=self.eta_d,
            input_power=self.power_w,
            c0_extraneous=self.c0_extraneous,
            n_imp_extraneous=self.n_imp_extraneous,
            n_fb=self.n_fb,
            taper_throughput=self.taper_throughput,
        )


class BudgetSection(_Section):
    """How the noise budget is assembled.

    ``physical`` derives it from [cavity] and [chain]; ``effective`` from
    (n_th, C0, C0_ex, ξ, n_imp_ex, n_c); ``occupancies`` takes n_tot and
    n_imp directly.
    """

    parameterization: Literal["physical", "effective", "occupancies"] = "occupancies"
    n_th: Optional[float] = Field(default=None, ge=0)
    n_tot: Optional[float] = Field(default=None, ge=0)
    n_imp: Optional[float] = Field(default=None, ge=0)
    c0: Optional[float] = Field(default=None, gt=0)
    c0_extraneous: float = Field(default=0.0, ge=0)
    xi: Optional[float] = Field(default=None, gt=0, le=1)
    n_imp_extraneous: float = Field(default=0.0, ge=0)
    n_c: Optional[float] = Field(default=None, ge=0)
    n_fb: float = Field(default=0.0, ge=0)


class FeedbackSection(_Section):
    gain: float = Field(default=0.0, ge=0)
    delay_s: Optional[float] = Field(default=None, ge=0)
    bandpass_center_hz: Optional[float] = Field(default=None, gt=0)
    bandpass_width_hz: Optional[float] = Field(default=None, gt=0)
    loop: Literal["delay", "velocity"] = "delay"

    def build(self, osc: OscillatorParams, gain: Optional[float] = None) -> FeedbackSettings:
        g = self.gain if gain is None else gain
        delay = self.delay_s
        if delay is None:
            delay = FeedbackSettings.quarter_period_delay(osc, g).delay
        return FeedbackSettings(
            gain=g,
            delay=delay,
            bandpass_center=(
                TWO_PI * self.bandpass_center_hz if self.bandpass_center_hz else None
            ),
            bandpass_width=(
                TWO_PI * self.bandpass_width_hz if self.bandpass_width_hz else None
            ),
            loop=self.loop,
        )


class SimulationSection(_Section):
    dt_s: Optional[float] = Field(default=None, gt=0)
    steps_per_period: float = Field(default=320.0, gt=0)
    duration_s: float = Field(..., gt=0)
    burn_in_s: float = Field(default=0.0, ge=0)
    n_trajectories: int = Field(default=1, ge=1)
    integrator: str = "exact"
    noise: bool = True
    initial_u: float = 0.0
    initial_v: float = 0.0
    threads: int = Field(default=1, ge=1)
    segment_length: int = Field(default=4096, ge=2)
    overlap: float = Field(default=0.5, ge=0, le=0.9)

    def step(self, osc: OscillatorParams) -> float:
        if self.dt_s is not None:
            return self.dt_s
        return TWO_PI / (osc.omega_m * self.steps_per_period)


class SweepSection(_Section):
    variable: Literal["n_c", "power_w", "gamma_eff_hz", "gain"]
    start: Optional[float] = Field(default=None, ge=0)
    stop: Optional[float] = Field(default=None, ge=0)
    points: int = 101
    scale: Literal["log", "linear"] = "log"
    values: Optional[FloatList] = None

    @model_validator(mode="after")
    def _check_range(self) -> "SweepSection":
        if self.values is not None:
            if not self.values:
                raise ValueError("sweep.values is empty")
            return self
        if self.points < 1:
            raise ValueError("sweep.points must be at least 1 (empty sweep)")
        if self.start is None or self.stop is None:
            raise ValueError("sweep.start and sweep.stop are required without sweep.values")
        if self.scale == "log" and (self.start <= 0 or self.stop <= 0):
            raise ValueError("log sweeps need positive sweep.start and sweep.stop")
        return self

    def grid(self) -> NDArray[np.float64]:
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        assert self.start is not None and self.stop is not None
        if self.scale == "log":
            return np.logspace(math.log10(self.start), math.log10(self.stop), self.points)
        return np.linspace(self.start, self.stop, self.points)


class FitSection(_Section):
    psd_path: Optional[str] = None
    trajectory_path: Optional[str] = None
    record: Literal["u", "y"] = "y"
    window_hz: Window
    weighting: Literal["uniform", "chi2"] = "uniform"
    signed_peak: bool = False
    unit: SpectralUnit = SpectralUnit.NORMALIZED
    n_averages: int = Field(default=1, ge=1)
    segment_length: int = Field(default=4096, ge=2)
    overlap: float = Field(default=0.5, ge=0, le=0.9)
    g0_hz: Optional[float] = Field(default=None, gt=0)
    max_iterations: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _check_source(self) -> "FitSection":
        if (self.psd_path is None) == (self.trajectory_path is None):
            raise ValueError("give exactly one of fit.psd_path and fit.trajectory_path")
        return self


class CalibrationSection(_Section):
    method: Literal["tone", "spring", "splitting"]
    source: Literal["file", "synthetic"] = "file"
    psd_path: Optional[str] = None
    spring_path: Optional[str] = None
    splitting_path: Optional[str] = None
    beta: float = Field(default=0.057, gt=0)
    tone_frequency_hz: float = Field(default=40e6, gt=0)
    transfer_ratio: float = Field(default=1.0, gt=0, le=1.5)
    n_th: Optional[float] = Field(default=None, gt=0)
    peak_window_hz: Optional[Window] = None
    tone_window_hz: Optional[Window] = None
    detunings_hz: Optional[FloatList] = None
    kappas_hz: Optional[FloatList] = None
    resolution_hz: float = Field(default=1.0, gt=0)


class RingdownSection(_Section):
    drive_off_time_s: float = Field(..., gt=0)
    bandwidth_hz: float = Field(..., gt=0)
    demod_frequency_hz: Optional[float] = Field(default=None, gt=0)
    drive_amplitude: Optional[float] = Field(default=None, gt=0)
    settle_s: Optional[float] = Field(default=None, ge=0)


class OutputSection(_Section):
    curves: str = "curves.csv"
    report: str = "report.json"
    manifest: str = "manifest.json"
    psd: bool = True
    trajectories: bool = False


_SECTIONS: Dict[str, type] = {
    "scenario": ScenarioSection,
    "oscillator": OscillatorSection,
    "cavity": CavitySection,
    "chain": ChainSection,
    "budget": BudgetSection,
    "feedback": FeedbackSection,
    "simulation": SimulationSection,
    "sweep": SweepSection,
    "fit": FitSection,
    "calibration": CalibrationSection,
    "ringdown": RingdownSection,
    "outputs": OutputSection,
}

_REQUIRED: Dict[str, Tuple[str, ...]] = {
    "analytic-budget": ("oscillator", "budget"),
    "cooling-sweep": ("oscillator", "budget", "sweep"),
    "simulate": ("oscillator", "budget", "simulation"),
    "fit": ("oscillator", "fit"),
    "calibrate": ("calibration",),
    "ringdown": ("oscillator", "budget", "simulation", "ringdown"),
}


class Scenario(BaseModel):
    """A parsed, validated scenario file."""

    scenario: ScenarioSection
    oscillator: Optional[OscillatorSection] = None
    cavity: Optional[CavitySection] = None
    chain: Optional[ChainSection] = None
    budget: Optional[BudgetSection] = None
    feedback: FeedbackSection = Field(default_factory=FeedbackSection)
    simulation: Optional[SimulationSection] = None
    sweep: Optional[SweepSection] = None
    fit: Optional[FitSection] = None
    calibration: Optional[CalibrationSection] = None
    ringdown: Optional[RingdownSection] = None
    outputs: OutputSection = Field(default_factory=OutputSection)
    base_dir: str = "."
    config_sha256: str = ""

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_mode(self) -> "Scenario":
        missing = [s for s in _REQUIRED[self.scenario.mode] if getattr(self, s) is None]
        if missing:
            raise ValueError(
                f"mode {self.scenario.mode} requires section(s): {', '.join(missing)}"
            )
        return self

    @property
    def name(self) -> str:
        return self.scenario.name

    @property
    def mode(self) -> str:
        return self.scenario.mode

    def resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else Path(self.base_dir) / candidate

    def build_oscillator(self) -> OscillatorParams:
        if self.oscillator is None:
            raise ConfigError("[oscillator] section is required")
        return self.oscillator.build()

    def build_cavity(self) -> CavityParams:
        if self.cavity is None:
            raise ConfigError("[cavity] section is required")
        return self.cavity.build()

    def build_chain(self, power: Optional[float] = None) -> MeasurementChain:
        if self.chain is None:
            raise ConfigError("[chain] section is required")
        chain = self.chain.build()
        if power is not None:
            chain = chain.model_copy(update={"input_power": power})
        return chain

    def build_budget(self, n_c: Optional[float] = None, power: Optional[float] = None) -> NoiseBudget:
        """Noise budget at the configured operating point.

        ``n_c`` overrides the intracavity photon number (effective
        parameterization); ``power`` overrides the input power (physical).
        """
        if self.budget is None:
            raise ConfigError("[budget] section is required")
        b = self.budget
        osc = self.build_oscillator()
        if b.parameterization == "physical":
            return noise_budget(osc, self.build_cavity(), self.build_chain(power))
        if b.parameterization == "effective":
            photons = b.n_c if n_c is None else n_c
            if b.n_th is None or b.c0 is None or b.xi is None or photons is None:
                raise ConfigError(
                    "effective budgets need budget.n_th, budget.c0, budget.xi and budget.n_c"
                )
            return effective_budget(
                n_th=b.n_th,
                c0=b.c0,
                xi=b.xi,
                n_c=photons,
                gamma_m=osc.gamma_m,
                c0_extraneous=b.c0_extraneous,
                n_imp_extraneous=b.n_imp_extraneous,
                n_fb=b.n_fb,
            )
        if b.n_imp is None or (b.n_tot is None and b.n_th is None):
            raise ConfigError("occupancy budgets need budget.n_imp and budget.n_tot or budget.n_th")
        if b.n_th is not None:
            n_ba = 0.0 if b.n_tot is None else b.n_tot - b.n_th
            if n_ba < 0.0:
                raise ConfigError("budget.n_tot must not be below budget.n_th")
            return NoiseBudget.from_components(
                gamma_m=osc.gamma_m,
                n_th=b.n_th,
                n_ba=n_ba,
                n_imp_shot=b.n_imp,
                n_fb=b.n_fb,
            )
        assert b.n_tot is not None
        return budget_from_occupancies(osc.gamma_m, b.n_tot, b.n_imp, b.n_fb)

    def build_feedback(self, gain: Optional[float] = None) -> FeedbackSettings:
        return self.feedback.build(self.build_oscillator(), gain)

    def build_sim_config(
        self,
        gain: Optional[float] = None,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
    ) -> SimConfig:
        if self.simulation is None:
            raise ConfigError("[simulation] section is required")
        sim = self.simulation
        osc = self.build_oscillator()
        return SimConfig(
            osc=osc,
            budget=self.build_budget(),
            fb=self.build_feedback(gain),
            dt=sim.step(osc),
            duration=sim.duration_s,
            burn_in=sim.burn_in_s,
            seed=self.scenario.seed if seed is None else seed,
            n_trajectories=sim.n_trajectories,
            integrator=sim.integrator,
            noise=sim.noise,
            initial_u=sim.initial_u,
            initial_v=sim.initial_v,
            threads=sim.threads if threads is None else threads,
        )


class ValidationReport(BaseModel):
    """Outcome of :func:`validate`; never raises for a bad scenario."""

    path: str
    name: Optional[str] = None
    valid: bool
    errors: List[str] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)


def bundled_scenarios() -> List[str]:
    folder = resources.files("optocool") / "scenarios"
    return sorted(
        entry.name[: -len(".cfg")]
        for entry in folder.iterdir()
        if entry.name.endswith(".cfg")
    )


def resolve_scenario(path_or_name: Union[str, Path]) -> Tuple[str, str]:
    """Returns (text, base directory) for a path or a bundled scenario name."""
    candidate = Path(path_or_name)
    if candidate.is_file():
        return candidate.read_text(encoding="utf-8"), str(candidate.parent.resolve())
    name = str(path_or_name)
    if name.endswith(".cfg"):
        name = name[: -len(".cfg")]
    bundled = resources.files("optocool") / "scenarios" / f"{name}.cfg"
    if bundled.is_file():
        return bundled.read_text(encoding="utf-8"), os.getcwd()
    raise ConfigError(f"no scenario file or bundled scenario named {path_or_name!r}")


def apply_env_overrides(
    parser: configparser.ConfigParser, environ: Optional[Mapping[str, str]] = None
) -> List[str]:
    """Applies ``OPTOCOOL__<SECTION>__<KEY>`` variables; returns the keys set."""
    env = os.environ if environ is None else environ
    applied = []
    for variable, value in sorted(env.items()):
        if not variable.startswith(ENV_PREFIX):
            continue
        parts = variable[len(ENV_PREFIX) :].lower().split("__")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"malformed override variable {variable}")
        section, key = parts
        if section not in _SECTIONS:
            raise ConfigError(f"{variable}: unknown section [{section}]")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
        applied.append(f"{section}.{key}")
    for key in applied:
        logger.info("override from environment: %s", key)
    return applied


def _parse_text(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(unknown)}")
    return parser


def _describe(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "scenario"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def config_digest(parser: configparser.ConfigParser) -> str:
    canonical = {s: dict(sorted(parser.items(s))) for s in sorted(parser.sections())}
    return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode()).hexdigest()


def load_scenario(
    path_or_name: Union[str, Path], environ: Optional[Mapping[str, str]] = None
) -> Scenario:
    """Parses a scenario file or bundled name, applying environment overrides.

    Raises:
        ConfigError: With ``section.key`` diagnostics on any problem.
    """
    text, base_dir = resolve_scenario(path_or_name)
    parser = _parse_text(text, str(path_or_name))
    apply_env_overrides(parser, environ)
    data: Dict[str, Any] = {s: dict(parser.items(s)) for s in parser.sections()}
    try:
        return Scenario(**data, base_dir=base_dir, config_sha256=config_digest(parser))
    except ValidationError as exc:
        raise ConfigError(f"{path_or_name}: {_describe(exc)}") from exc


def _consistency_warnings(scenario: Scenario) -> List[str]:
    warnings: List[str] = []
    b = scenario.budget
    if b is not None and b.xi is not None and scenario.cavity and scenario.chain:
        derived = readout_efficiency(scenario.build_cavity(), scenario.build_chain())
        if abs(b.xi / derived - 1.0) > XI_TOLERANCE:
            warnings.append(
                f"budget.xi = {b.xi:.4g} disagrees with η_c·η_d·splitting factor = "
                f"{derived:.4g} from [cavity]/[chain] by more than "
                f"{100 * XI_TOLERANCE:.0f}%"
            )
    return warnings


def _operating_budget(scenario: Scenario) -> NoiseBudget:
    sweep = scenario.sweep
    if scenario.mode != "analytic-budget" or sweep is None:
        return scenario.build_budget()
    first = float(sweep.grid()[0])
    if sweep.variable == "n_c":
        return scenario.build_budget(n_c=first)
    if sweep.variable == "power_w":
        return scenario.build_budget(power=first)
    raise ConfigError("analytic-budget sweeps n_c or power_w")


def validate(
    path_or_name: Union[str, Path], environ: Optional[Mapping[str, str]] = None
) -> ValidationReport:
    """Checks ranges, simulation invariants and cross-parameter consistency
    without executing anything."""
    report: Dict[str, Any] = {"path": str(path_or_name), "errors": [], "warnings": []}
    try:
        scenario = load_scenario(path_or_name, environ)
    except ConfigError as exc:
        report["errors"].append(str(exc))
        return ValidationReport(valid=False, **report)
    report["name"] = scenario.name
    try:
        if scenario.oscillator is not None:
            scenario.build_oscillator()
        if scenario.budget is not None:
            _operating_budget(scenario)
        if scenario.simulation is not None:
            config = scenario.build_sim_config()
            report["warnings"].extend(config.statistics_issues())
        report["warnings"].extend(_consistency_warnings(scenario))
    except ValidationError as exc:
        report["errors"].append(f"SimConfig: {_describe(exc)}")
    except (ConfigError, ValueError) as exc:
        report["errors"].append(str(exc))
    return ValidationReport(valid=not report["errors"], **report)
