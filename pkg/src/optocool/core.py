"""Core parameter models and the closed-form feedback-cooling noise budget.

All rates and frequencies are angular (rad/s). Spectra are single-sided, per
ordinary-frequency hertz. Conversions from Hz happen at the configuration
boundary only.
"""

import logging
import math
from typing import List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import constants

from .exceptions import PhysicsError, ReadoutSingularError

logger = logging.getLogger(__name__)

HBAR = constants.hbar
K_B = constants.k
SPEED_OF_LIGHT = constants.c
TWO_PI = 2.0 * math.pi

HIGH_Q_RATIO = 100.0
BAD_CAVITY_RATIO = 10.0
# Neighbouring 4.6 MHz mode limits the single-mode model to Γ_eff ≲ 2π·200 kHz
# at Ω_m = 2π·4.32 MHz; kept as a fraction so it carries into scaled units.
NEIGHBOUR_MODE_FRACTION = 200e3 / 4.32e6
ASYMPTOTIC_MIN_OCCUPANCY = 50.0
"""Smallest force occupancy trusted by the asymptotic minimum-occupancy form."""

FloatArray = NDArray[np.float64]
GridLike = Union[Sequence[float], FloatArray]


class OscillatorParams(BaseModel):
    """Mechanical mode parameters.

    Attributes:
        omega_m: Mechanical angular frequency (rad/s).
        gamma_m: Intrinsic energy damping rate (rad/s).
        mass: Effective mass (kg).
        temperature: Bath temperature (K).
        x_zp_supplied: Zero-point amplitude (m) to use instead of the value
            derived from mass and frequency. The two are never reconciled.
    """

    omega_m: float = Field(..., gt=0, description="Mechanical frequency (rad/s)")
    gamma_m: float = Field(..., gt=0, description="Mechanical damping rate (rad/s)")
    mass: float = Field(default=1.0, gt=0, description="Effective mass (kg)")
    temperature: float = Field(default=0.0, ge=0, description="Bath temperature (K)")
    x_zp_supplied: Optional[float] = Field(
        default=None, gt=0, description="Directly supplied zero-point amplitude (m)"
    )

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _flag_low_q(self) -> "OscillatorParams":
        if not self.high_q:
            logger.warning(
                "Q = %.3g is below %g; area-based occupancy formulas assume a "
                "narrow Lorentzian",
                self.quality_factor,
                HIGH_Q_RATIO,
            )
        return self

    @property
    def x_zp(self) -> float:
        if self.x_zp_supplied is not None:
            return self.x_zp_supplied
        return math.sqrt(HBAR / (2.0 * self.mass * self.omega_m))

    @property
    def quality_factor(self) -> float:
        return self.omega_m / self.gamma_m

    @property
    def high_q(self) -> bool:
        return self.quality_factor >= HIGH_Q_RATIO

    @classmethod
    def from_hz(
        cls,
        frequency: float,
        linewidth: float,
        mass: float,
        temperature: float,
        x_zp: Optional[float] = None,
    ) -> "OscillatorParams":
        """Build from ordinary frequencies in Hz."""
        return cls(
            omega_m=TWO_PI * frequency,
            gamma_m=TWO_PI * linewidth,
            mass=mass,
            temperature=temperature,
            x_zp_supplied=x_zp,
        )

    @classmethod
    def scaled(cls, gamma_ratio: float = 1e-3) -> "OscillatorParams":
        """Desk-scale oscillator: Ω_m = 1, Γ_m = gamma_ratio, x_zp = 1."""
        return cls(omega_m=1.0, gamma_m=gamma_ratio, mass=1.0, x_zp_supplied=1.0)


class CavityParams(BaseModel):
    """Optical resonance of the whispering-gallery readout cavity.

    Detuning follows Δ = ω_laser − ω_cavity, so the red side is Δ < 0.
    """

    kappa_0: float = Field(..., gt=0, description="Intrinsic decay rate (rad/s)")
    kappa_ex: float = Field(..., ge=0, description="External coupling rate (rad/s)")
    gamma_split: float = Field(default=0.0, ge=0, description="Mode splitting (rad/s)")
    detuning: float = Field(default=0.0, description="Laser-cavity detuning (rad/s)")
    wavelength: float = Field(default=775e-9, gt=0, description="Wavelength (m)")

    model_config = ConfigDict(frozen=True)

    @property
    def kappa(self) -> float:
        return self.kappa_0 + self.kappa_ex

    @property
    def eta_c(self) -> float:
        return self.kappa_ex / self.kappa

    @property
    def omega_c(self) -> float:
        return TWO_PI * SPEED_OF_LIGHT / self.wavelength

    @property
    def splitting_ratio(self) -> float:
        return self.gamma_split / self.kappa


class MeasurementChain(BaseModel):
    """Probe, coupling and detection parameters of the position readout."""

    g0: float = Field(..., gt=0, description="Vacuum optomechanical coupling (rad/s)")
    eta_d: float = Field(default=1.0, gt=0, le=1, description="Detection efficiency")
    input_power: float = Field(default=0.0, ge=0, description="Input power (W)")
    c0_extraneous: float = Field(
        default=0.0, ge=0, description="Excess cooperativity C0_ex"
    )
    n_imp_extraneous: float = Field(
        default=0.0, ge=0, description="Extraneous imprecision occupancy"
    )
    n_fb: float = Field(default=0.0, ge=0, description="Feedback actuator occupancy")
    taper_throughput: float = Field(
        default=1.0, gt=0, le=1, description="Taper transmission loss factor"
    )

    model_config = ConfigDict(frozen=True)

    def cooperativity(self, cav: CavityParams, osc: OscillatorParams) -> float:
        """Single-photon cooperativity C0 = 4 g0² / (κ Γ_m)."""
        return 4.0 * self.g0**2 / (cav.kappa * osc.gamma_m)


class NoiseBudget(BaseModel):
    """Occupancy-language summary of the measurement.

    Build instances with :meth:`from_components`; it fills in every derived
    field so the sum invariants hold by construction.
    """

    gamma_m: float = Field(..., gt=0, description="Mechanical damping rate (rad/s)")
    n_th: float = Field(..., ge=0, description="Thermal occupancy")
    n_ba: float = Field(default=0.0, ge=0, description="Quantum back-action occupancy")
    n_ba_ex: float = Field(default=0.0, ge=0, description="Extraneous back-action")
    n_tot: float = Field(..., ge=0, description="Total bath occupancy")
    n_imp_shot: float = Field(..., ge=0, description="Shot-noise imprecision")
    n_imp_ex: float = Field(default=0.0, ge=0, description="Extraneous imprecision")
    n_imp: float = Field(..., ge=0, description="Total imprecision occupancy")
    n_fb: float = Field(default=0.0, ge=0, description="Feedback actuator occupancy")
    gamma_meas: float = Field(..., ge=0, description="Measurement rate (rad/s)")
    gamma_th: float = Field(..., ge=0, description="Thermal decoherence rate (rad/s)")
    product: float = Field(..., ge=0, description="4 sqrt(n_imp n_tot)")
    product_closed_form: Optional[float] = Field(
        default=None, description="Same product from the efficiency parameterization"
    )

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_sums(self) -> "NoiseBudget":
        if not math.isclose(
            self.n_tot, self.n_th + self.n_ba + self.n_ba_ex, rel_tol=1e-12
        ):
            raise ValueError("n_tot must equal n_th + n_ba + n_ba_ex")
        if not math.isclose(self.n_imp, self.n_imp_shot + self.n_imp_ex, rel_tol=1e-12):
            raise ValueError("n_imp must equal n_imp_shot + n_imp_ex")
        return self

    @classmethod
    def from_components(
        cls,
        gamma_m: float,
        n_th: float,
        n_imp_shot: float,
        n_ba: float = 0.0,
        n_ba_ex: float = 0.0,
        n_imp_ex: float = 0.0,
        n_fb: float = 0.0,
        product_closed_form: Optional[float] = None,
    ) -> "NoiseBudget":
        n_tot = n_th + n_ba + n_ba_ex
        n_imp = n_imp_shot + n_imp_ex
        if n_imp == 0.0:
            gamma_meas = math.inf
        else:
            gamma_meas = gamma_m / (16.0 * n_imp)
        product = 4.0 * math.sqrt(n_imp * n_tot) if math.isfinite(n_imp) else math.inf
        if product_closed_form is not None and math.isfinite(product):
            if not math.isclose(product, product_closed_form, rel_tol=1e-9):
                raise PhysicsError(
                    f"product from components ({product:.12g}) disagrees with "
                    f"closed form ({product_closed_form:.12g})"
                )
        return cls(
            gamma_m=gamma_m,
            n_th=n_th,
            n_ba=n_ba,
            n_ba_ex=n_ba_ex,
            n_tot=n_tot,
            n_imp_shot=n_imp_shot,
            n_imp_ex=n_imp_ex,
            n_imp=n_imp,
            n_fb=n_fb,
            gamma_meas=gamma_meas,
            gamma_th=n_th * gamma_m,
            product=product,
            product_closed_form=product_closed_form,
        )

    @property
    def force_occupancy(self) -> float:
        """n_th + n_ba + n_ba_ex + n_fb, the occupancy of all force noise."""
        return self.n_tot + self.n_fb

    @property
    def measurement_efficiency(self) -> float:
        """Γ_meas / Γ_tot with Γ_tot = n_tot Γ_m; equals product⁻²."""
        if self.n_tot == 0.0:
            return math.inf
        return self.gamma_meas / (self.n_tot * self.gamma_m)

    @property
    def imprecision_below_sql_db(self) -> float:
        """How far n_imp sits below the SQL value 1/4, in dB."""
        if self.n_imp == 0.0:
            return math.inf
        return 10.0 * math.log10(0.25 / self.n_imp)


class FeedbackSettings(BaseModel):
    """Feedback loop settings.

    ``loop="delay"`` is the bandpass plus delay-line loop; ``loop="velocity"``
    is ideal cold damping on the measured record, the loop the closed-form
    spectra describe. Only the gain enters the analytic model.
    """

    gain: float = Field(default=0.0, ge=0, description="Open-loop gain g_fb")
    delay: float = Field(default=0.0, ge=0, description="Loop delay tau (s)")
    bandpass_center: Optional[float] = Field(
        default=None, gt=0, description="Bandpass center (rad/s); defaults to Ω_m"
    )
    bandpass_width: Optional[float] = Field(
        default=None, gt=0, description="Bandpass width (rad/s); defaults to Ω_m/2"
    )
    loop: Literal["delay", "velocity"] = Field(
        default="delay", description="Loop implementation used by the simulator"
    )

    model_config = ConfigDict(frozen=True)

    def gamma_fb(self, gamma_m: float) -> float:
        return self.gain * gamma_m

    def gamma_eff(self, gamma_m: float) -> float:
        return (1.0 + self.gain) * gamma_m

    def with_gain(self, gain: float) -> "FeedbackSettings":
        return self.model_copy(update={"gain": gain})

    @classmethod
    def quarter_period_delay(cls, osc: OscillatorParams, gain: float) -> "FeedbackSettings":
        """Delay-line loop tuned to τ = 3π/(2Ω_m), the velocity-like phase."""
        return cls(gain=gain, delay=1.5 * math.pi / osc.omega_m, loop="delay")


class ClosedLoopSpectra(NamedTuple):
    s_x: FloatArray
    s_y: FloatArray


class FilterResponse(NamedTuple):
    magnitude: FloatArray
    phase: FloatArray


class CoolingCurve(NamedTuple):
    gain: FloatArray
    gamma_eff: FloatArray
    occupancy_plus_half: FloatArray
    thermal_part: FloatArray
    imprecision_part: FloatArray
    within_single_mode_bound: NDArray[np.bool_]


class MinimumOccupancy(BaseModel):
    """Minimum phonon occupancy and the gain that reaches it.

    ``n_m_min`` is the asymptotic form 2√(N n_imp) − 1/2, clamped at 0;
    ``g_fb_opt`` is the exact stationary point of the occupancy curve.
    """

    n_m_min: float = Field(..., ge=0)
    g_fb_opt: float = Field(..., ge=0)
    n_m_min_exact: float = Field(..., ge=0)
    g_fb_opt_asymptotic: float = Field(..., ge=0)
    formula_valid: bool = True
    warnings: List[str] = Field(default_factory=list)

    model_config = ConfigDict(frozen=True)


class ConditionVerdict(BaseModel):
    satisfied: bool
    value: float
    bound: float
    margin: float = Field(..., description="bound / value; above 1 when satisfied")

    model_config = ConfigDict(frozen=True)


class GroundStateReport(BaseModel):
    """Verdicts on the imprecision needed for ground-state feedback cooling."""

    unit_occupancy: ConditionVerdict = Field(
        ..., description="n_imp < (9/16)/(n_th + n_ba), i.e. n_m,min < 1"
    )
    necessary: ConditionVerdict = Field(..., description="n_imp < 1/(2 n_th)")
    rate_ratio: float = Field(..., description="Γ_meas / Γ_th")
    rate_requirement: float = Field(default=0.125, description="Required Γ_meas/Γ_th")
    rate_satisfied: bool
    rate_shortfall: float = Field(
        ..., description="Fraction by which Γ_meas/Γ_th misses 1/8 (negative if met)"
    )

    model_config = ConfigDict(frozen=True)


def thermal_occupancy(osc: OscillatorParams) -> float:
    """Bath occupancy n_th = coth(ħΩ_m / 2k_BT) / 2.

    Reduces to k_BT/ħΩ_m for k_BT ≫ ħΩ_m. Returns 1/2 at T = 0.
    """
    if osc.temperature == 0.0:
        return 0.5
    x = HBAR * osc.omega_m / (2.0 * K_B * osc.temperature)
    return 0.5 / math.tanh(x)


def zero_point_spectra(osc: OscillatorParams, g0: float) -> Tuple[float, float]:
    """Peak zero-point densities (S_x_zp in m²/Hz, S_ω_zp in (rad/s)²/Hz)."""
    s_x_zp = 4.0 * osc.x_zp**2 / osc.gamma_m
    s_omega_zp = 4.0 * g0**2 / osc.gamma_m
    return s_x_zp, s_omega_zp


def _require_resonant(cav: CavityParams, operation: str) -> None:
    if cav.detuning != 0.0:
        raise PhysicsError(
            f"{operation} requires resonant probing (detuning = 0), got "
            f"{cav.detuning:.6g} rad/s"
        )


def _photon_flux(cav: CavityParams, chain: MeasurementChain) -> float:
    return chain.input_power / (HBAR * cav.omega_c)


def intracavity_photons(
    cav: CavityParams, chain: MeasurementChain
) -> Tuple[float, float]:
    """Steady-state photon numbers (n₊, n₋) of the probed and scattered modes.

    Raises:
        PhysicsError: If the laser is detuned from the cavity.
    """
    _require_resonant(cav, "intracavity_photons")
    r2 = cav.splitting_ratio**2
    n_plus = 4.0 * cav.eta_c / cav.kappa * _photon_flux(cav, chain) / (1.0 + r2) ** 2
    return n_plus, r2 * n_plus


def transmission(cav: CavityParams, detuning_scan: GridLike) -> FloatArray:
    """Normalized forward transmission P_out/P_in of the split-mode cavity.

    Evaluated from the two-mode steady state; at zero detuning this equals
    1 − 4η_c[(1 + γ²/κ²) − η_c]/(1 + γ²/κ²)².
    """
    delta = np.asarray(detuning_scan, dtype=float)
    d = cav.kappa / 2.0 - 1j * delta
    t = 1.0 - cav.kappa_ex * d / (d**2 + (cav.gamma_split / 2.0) ** 2)
    return np.asarray(np.abs(t) ** 2, dtype=float)


def _backaction_prefactor(cav: CavityParams, chain: MeasurementChain) -> float:
    kappa = cav.kappa
    return (2.0 * chain.g0**2 / kappa) * (
        4.0 * cav.eta_c * _photon_flux(cav, chain) / kappa
    )


def spring_shift(
    cav: CavityParams, chain: MeasurementChain, detuning: GridLike
) -> FloatArray:
    """Optical spring shift ΔΩ_ba (rad/s) summed over both split modes."""
    delta = np.asarray(detuning, dtype=float)
    half_k = cav.kappa / 2.0
    total = np.zeros_like(delta)
    for j in (1.0, -1.0):
        shifted = delta + j * cav.gamma_split / 2.0
        total += half_k**3 * shifted / (shifted**2 + half_k**2) ** 2
    return np.asarray(_backaction_prefactor(cav, chain) * total, dtype=float)


def backaction_damping(
    cav: CavityParams,
    chain: MeasurementChain,
    osc: OscillatorParams,
    detuning: GridLike,
) -> FloatArray:
    """Dynamic back-action damping Γ_ba (rad/s); positive on the red side."""
    delta = np.asarray(detuning, dtype=float)
    kappa = cav.kappa
    total = np.zeros_like(delta)
    for j in (1.0, -1.0):
        shifted = delta + j * cav.gamma_split / 2.0
        total += kappa**5 * shifted / (shifted**2 + (kappa / 2.0) ** 2) ** 3
    scale = osc.omega_m / (4.0 * kappa) * _backaction_prefactor(cav, chain)
    return np.asarray(-scale * total, dtype=float)


def dynamic_backaction(
    cav: CavityParams, chain: MeasurementChain, osc: OscillatorParams
) -> Tuple[float, float]:
    """Spring shift and damping at the cavity's configured detuning.

    Both vanish for resonant probing.
    """
    if cav.kappa < BAD_CAVITY_RATIO * osc.omega_m:
        logger.warning(
            "kappa/omega_m = %.3g; dynamic back-action expressions assume the "
            "bad-cavity limit",
            cav.kappa / osc.omega_m,
        )
    shift = float(spring_shift(cav, chain, [cav.detuning])[0])
    damping = float(backaction_damping(cav, chain, osc, [cav.detuning])[0])
    return shift, damping


def backaction_occupancy(
    chain: MeasurementChain, cav: CavityParams, osc: OscillatorParams
) -> Tuple[float, float]:
    """Quantum and extraneous back-action occupancies (C0 n₊, C0_ex n₊)."""
    n_plus, _ = intracavity_photons(cav, chain)
    return chain.cooperativity(cav, osc) * n_plus, chain.c0_extraneous * n_plus


def readout_efficiency(cav: CavityParams, chain: MeasurementChain) -> float:
    """Overall readout efficiency ξ, including the mode-splitting penalty."""
    r2 = cav.splitting_ratio**2
    return (
        cav.eta_c * chain.eta_d * ((1.0 - r2) / (1.0 + r2)) ** 2 * chain.taper_throughput
    )


def imprecision_from_efficiency(xi: float, c0: float, n_c: float) -> float:
    """Shot-noise imprecision (16 ξ C0 n_c)⁻¹ in the efficiency form."""
    denominator = 16.0 * xi * c0 * n_c
    return math.inf if denominator == 0.0 else 1.0 / denominator


def imprecision_occupancy(
    chain: MeasurementChain, cav: CavityParams, osc: OscillatorParams
) -> Tuple[float, float]:
    """Shot-noise and total imprecision occupancies.

    Raises:
        ReadoutSingularError: If γ = κ, where the split-mode readout is null.
    """
    if math.isclose(cav.gamma_split, cav.kappa, rel_tol=1e-12):
        raise ReadoutSingularError("readout singular: split-mode transfer null")
    n_plus, _ = intracavity_photons(cav, chain)
    xi = readout_efficiency(cav, chain)
    shot = imprecision_from_efficiency(xi, chain.cooperativity(cav, osc), n_plus)
    return shot, shot + chain.n_imp_extraneous


def product_closed_form(
    n_th: float,
    c0: float,
    c0_extraneous: float,
    xi: float,
    n_imp_extraneous: float,
    n_c: float,
) -> float:
    """Imprecision-back-action product written in terms of ξ, C0 and n_c."""
    excess_ratio = 16.0 * xi * c0 * n_imp_extraneous * n_c
    return math.sqrt(
        (1.0 / xi) * (1.0 + n_th / (c0 * n_c) + c0_extraneous / c0) * (1.0 + excess_ratio)
    )


def effective_budget(
    n_th: float,
    c0: float,
    xi: float,
    n_c: float,
    gamma_m: float,
    c0_extraneous: float = 0.0,
    n_imp_extraneous: float = 0.0,
    n_fb: float = 0.0,
) -> NoiseBudget:
    """Noise budget from the efficiency parameterization (ξ, C0, n_c)."""
    closed = None
    if n_c > 0.0:
        closed = product_closed_form(n_th, c0, c0_extraneous, xi, n_imp_extraneous, n_c)
    return NoiseBudget.from_components(
        gamma_m=gamma_m,
        n_th=n_th,
        n_ba=c0 * n_c,
        n_ba_ex=c0_extraneous * n_c,
        n_imp_shot=imprecision_from_efficiency(xi, c0, n_c),
        n_imp_ex=n_imp_extraneous,
        n_fb=n_fb,
        product_closed_form=closed,
    )


def budget_from_occupancies(
    gamma_m: float, n_tot: float, n_imp: float, n_fb: float = 0.0
) -> NoiseBudget:
    """Budget for measured (n_tot, n_imp) without a component breakdown."""
    return NoiseBudget.from_components(
        gamma_m=gamma_m, n_th=n_tot, n_imp_shot=n_imp, n_fb=n_fb
    )


def noise_budget(
    osc: OscillatorParams, cav: CavityParams, chain: MeasurementChain
) -> NoiseBudget:
    """Assemble the full budget from physical parameters.

    Raises:
        PhysicsError: If the probe is detuned.
        ReadoutSingularError: Propagated from :func:`imprecision_occupancy`.
    """
    _require_resonant(cav, "noise_budget")
    n_th = thermal_occupancy(osc)
    n_plus, _ = intracavity_photons(cav, chain)
    n_ba, n_ba_ex = backaction_occupancy(chain, cav, osc)
    shot, _ = imprecision_occupancy(chain, cav, osc)
    closed = None
    xi = readout_efficiency(cav, chain)
    if n_plus > 0.0 and xi > 0.0:
        closed = product_closed_form(
            n_th,
            chain.cooperativity(cav, osc),
            chain.c0_extraneous,
            xi,
            chain.n_imp_extraneous,
            n_plus,
        )
    return NoiseBudget.from_components(
        gamma_m=osc.gamma_m,
        n_th=n_th,
        n_ba=n_ba,
        n_ba_ex=n_ba_ex,
        n_imp_shot=shot,
        n_imp_ex=chain.n_imp_extraneous,
        n_fb=chain.n_fb,
        product_closed_form=closed,
    )


def closed_loop_spectra(
    osc: OscillatorParams,
    budget: NoiseBudget,
    fb: FeedbackSettings,
    omega_grid: GridLike,
) -> ClosedLoopSpectra:
    """Position and measurement-record spectra under velocity feedback.

    Both are returned normalized to 2 S_x_zp. S_y dips below the imprecision
    floor at resonance once (n_tot + 1/2 + n_imp)(Γ_m/Γ_eff)² < n_imp.
    """
    omega = np.asarray(omega_grid, dtype=float)
    om2, gm = osc.omega_m**2, osc.gamma_m
    g = fb.gain
    detune2 = (om2 - omega**2) ** 2
    denominator = detune2 + omega**2 * fb.gamma_eff(gm) ** 2
    force = (budget.force_occupancy + 0.5) * om2 * gm**2
    s_x = (force + budget.n_imp * g**2 * omega**2 * gm**2) / denominator
    s_y = (force + budget.n_imp * (detune2 + omega**2 * gm**2)) / denominator
    return ClosedLoopSpectra(s_x=s_x, s_y=s_y)


def phonon_occupancy(budget: NoiseBudget, fb: FeedbackSettings) -> float:
    """Mean phonon number under feedback gain g_fb.

    n_m = [(n_tot + n_fb + 1/2) + n_imp g²] / (1 + g) − 1/2, floored at 0.
    """
    g = fb.gain
    imprecision = budget.n_imp * g**2 if g > 0.0 else 0.0
    n_m = (budget.force_occupancy + 0.5 + imprecision) / (1.0 + g) - 0.5
    if n_m < 0.0:
        logger.warning("occupancy %.3g below zero clamped; imprecision negligible", n_m)
        return 0.0
    return n_m


def minimum_occupancy(budget: NoiseBudget) -> MinimumOccupancy:
    """Lowest reachable occupancy and the gain at which it is reached."""
    total = budget.force_occupancy
    n_imp = budget.n_imp
    warnings: List[str] = []
    if n_imp == 0.0:
        g_exact = math.inf
        g_asym = math.inf
        n_exact = 0.0
    elif math.isinf(n_imp):
        g_exact = 0.0
        g_asym = 0.0
        n_exact = total
    else:
        g_exact = math.sqrt(1.0 + (total + 0.5) / n_imp) - 1.0
        g_asym = math.sqrt(total / n_imp)
        # at the stationary point n_m + 1/2 = 2 n_imp g
        n_exact = max(2.0 * n_imp * g_exact - 0.5, 0.0)
    n_min = 2.0 * math.sqrt(total * n_imp) - 0.5
    valid = total > ASYMPTOTIC_MIN_OCCUPANCY
    if not valid:
        warnings.append(f"asymptotic form assumes n_th >> 1/2 (got {total:.3g})")
    if n_min < 0.0:
        warnings.append(f"asymptotic minimum {n_min:.3g} clamped to 0")
        n_min = 0.0
        valid = False
    for message in warnings:
        logger.warning(message)
    return MinimumOccupancy(
        n_m_min=n_min,
        g_fb_opt=g_exact,
        n_m_min_exact=n_exact,
        g_fb_opt_asymptotic=g_asym,
        formula_valid=valid,
        warnings=warnings,
    )


def optimal_filter(
    osc: OscillatorParams, budget: NoiseBudget, omega_grid: GridLike
) -> FilterResponse:
    """Magnitude (s²) and phase (rad) of the optimal feedback filter.

    The phase is arg χ_m, continuous through resonance: 0 at Ω → 0, π/2 at
    Ω_m, approximately π/2 + 2(Ω − Ω_m)/Γ_m nearby.
    """
    omega = np.asarray(omega_grid, dtype=float)
    om2, gm = osc.omega_m**2, osc.gamma_m
    inverse_chi = np.hypot(om2 - omega**2, omega * gm)
    force = (budget.force_occupancy + 0.5) * om2 * gm**2
    magnitude = budget.n_imp * inverse_chi / force
    phase = np.arctan2(omega * gm, om2 - omega**2)
    return FilterResponse(magnitude=magnitude, phase=phase)


def _verdict(value: float, bound: float) -> ConditionVerdict:
    margin = math.inf if value == 0.0 else bound / value
    return ConditionVerdict(satisfied=value < bound, value=value, bound=bound, margin=margin)


def ground_state_conditions(budget: NoiseBudget) -> GroundStateReport:
    """Check the imprecision requirements for cooling to n_m < 1."""
    thermal_and_quantum = budget.n_th + budget.n_ba
    unit_bound = math.inf if thermal_and_quantum == 0.0 else 0.5625 / thermal_and_quantum
    necessary_bound = math.inf if budget.n_th == 0.0 else 1.0 / (2.0 * budget.n_th)
    necessary = _verdict(budget.n_imp, necessary_bound)
    if budget.gamma_th == 0.0:
        ratio = math.inf
    else:
        ratio = budget.gamma_meas / budget.gamma_th
    return GroundStateReport(
        unit_occupancy=_verdict(budget.n_imp, unit_bound),
        necessary=necessary,
        rate_ratio=ratio,
        # same inequality as the necessary condition, kept in occupancy form
        rate_satisfied=necessary.satisfied,
        rate_shortfall=1.0 - ratio / 0.125,
    )


def cooling_sweep(
    budget: NoiseBudget, gains: GridLike, omega_m: Optional[float] = None
) -> CoolingCurve:
    """Occupancy n_m + 1/2 along a gain sweep, split into its two parts.

    When ``omega_m`` is given, points with Γ_eff beyond the single-mode
    validity bound are marked in ``within_single_mode_bound``.
    """
    g = np.asarray(gains, dtype=float)
    thermal = (budget.force_occupancy + 0.5) / (1.0 + g)
    imprecision = budget.n_imp * g**2 / (1.0 + g)
    gamma_eff = budget.gamma_m * (1.0 + g)
    if omega_m is None:
        within = np.ones_like(g, dtype=bool)
    else:
        within = gamma_eff < NEIGHBOUR_MODE_FRACTION * omega_m
        if not within.all():
            logger.warning(
                "%d sweep points exceed the single-mode bound Γ_eff < %.3g rad/s",
                int((~within).sum()),
                NEIGHBOUR_MODE_FRACTION * omega_m,
            )
    return CoolingCurve(
        gain=g,
        gamma_eff=gamma_eff,
        occupancy_plus_half=thermal + imprecision,
        thermal_part=thermal,
        imprecision_part=imprecision,
        within_single_mode_bound=within,
    )


def ground_state_probability(n_m: float) -> float:
    """Probability 1/(1 + n_m) of finding the oscillator in its ground state."""
    return 1.0 / (1.0 + n_m)


def apparent_imprecision(n_imp: float, gain: float) -> float:
    """Imprecision inferred from a damped peak: n_imp (Γ_m + Γ_fb)/Γ_m."""
    return n_imp * (1.0 + gain)
