"""Scenario execution: one handler per mode, staged artifacts and a manifest."""

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from . import __version__
from .calibration import (
    CalibrationReport,
    CalibrationTone,
    calibrate_g0,
    fit_mode_splitting,
    fit_ringdown,
    g0_from_spring,
    lock_in,
    mode_splitting_points_from_csv,
    spring_points_from_csv,
    synthetic_spring_points,
    synthetic_splitting_points,
    synthetic_tone_psd,
)
from .config import Scenario
from .core import (
    TWO_PI,
    cooling_sweep,
    ground_state_conditions,
    ground_state_probability,
    minimum_occupancy,
    phonon_occupancy,
    thermal_occupancy,
)
from .database import ArtifactRecord, RunCatalog, RunRecord
from .engine import Trajectory, simulate, simulate_ringdown_ensemble
from .exceptions import ConfigError, OptocoolError
from .spectral import (
    FitReport,
    Psd,
    SpectralUnit,
    extract_occupancies,
    fit_lorentzian,
    integrate_variance,
    phonon_from_spectrum,
    psd_digest,
    read_psd_csv,
    welch_psd,
    write_fit_report,
    write_psd_csv,
    zero_point_level,
)

logger = logging.getLogger(__name__)

MAX_ENVELOPE_ROWS = 10000
PEAK_WINDOW_LINEWIDTHS = 5.0
TONE_WINDOW_BINS = 3.0


class Artifact(BaseModel):
    path: str
    sha256: str
    bytes: int = Field(..., ge=0)


class RunResult(BaseModel):
    run_id: str
    scenario: str
    mode: str
    out_dir: str
    artifacts: List[Artifact]
    metrics: Dict[str, float]


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _finite(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    text = json.dumps(_finite(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def write_csv(path: Path, columns: Sequence[str], rows: np.ndarray) -> None:
    np.savetxt(
        path,
        np.atleast_2d(rows),
        fmt="%.12g",
        delimiter=",",
        header=",".join(columns),
        comments="",
    )


def default_peak_window(f_m: float, linewidth_hz: float) -> Tuple[float, float]:
    """±5 linewidths around the mechanical peak.

    A Lorentzian keeps (2/π)·atan(10), about 94%, of its area inside this
    window; pass ``calibration.peak_window_hz`` for a wider one.
    """
    half = PEAK_WINDOW_LINEWIDTHS * linewidth_hz
    inside = 2.0 / math.pi * math.atan(2.0 * PEAK_WINDOW_LINEWIDTHS)
    logger.warning(
        "default peak window ±%.0f linewidths leaves %.1f%% of a Lorentzian outside",
        PEAK_WINDOW_LINEWIDTHS,
        100.0 * (1.0 - inside),
    )
    return (f_m - half, f_m + half)


def average_psd(psds: Sequence[Psd]) -> Psd:
    """Mean of PSDs sharing one frequency grid."""
    first = psds[0]
    value = np.mean([p.value for p in psds], axis=0)
    return first.model_copy(
        update={"value": value, "n_averages": sum(p.n_averages for p in psds)}
    )


class ScenarioRunner:
    """Executes one scenario into ``out_dir``.

    Artifacts are written to a staging directory inside ``out_dir`` and moved
    into place only when the whole scenario succeeds; a failure leaves
    nothing behind but the catalog entry.
    """

    def __init__(
        self,
        scenario: Scenario,
        out_dir: Path,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
        catalog: Optional[RunCatalog] = None,
    ):
        self.scenario = scenario
        self.out_dir = Path(out_dir)
        self.seed = scenario.scenario.seed if seed is None else seed
        self.threads = threads
        self.catalog = catalog
        self._staging = self.out_dir
        self._handlers: Dict[str, Callable[[], Dict[str, float]]] = {
            "analytic-budget": self._run_analytic_budget,
            "cooling-sweep": self._run_cooling_sweep,
            "simulate": self._run_simulate,
            "fit": self._run_fit,
            "calibrate": self._run_calibrate,
            "ringdown": self._run_ringdown,
        }

    def _path(self, name: str) -> Path:
        return self._staging / name

    def run(self) -> RunResult:
        """Runs the scenario and publishes its artifacts.

        Raises:
            OptocoolError: Configuration or physics failures, unchanged.
            OSError: If the output directory cannot be written.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        record = RunRecord(
            scenario=self.scenario.name,
            mode=self.scenario.mode,
            config_sha256=self.scenario.config_sha256,
            seed=self.seed,
            out_dir=str(self.out_dir),
        )
        if self.catalog is not None:
            self.catalog.start_run(record)
        self._staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))
        try:
            logger.info("running %s (%s)", self.scenario.name, self.scenario.mode)
            metrics = self._handlers[self.scenario.mode]()
            self._write_manifest()
            artifacts = self._publish()
        except OptocoolError as exc:
            self._record_failure(record.id, exc.exit_code, str(exc))
            raise
        except OSError as exc:
            self._record_failure(record.id, 4, str(exc))
            raise
        finally:
            shutil.rmtree(self._staging, ignore_errors=True)
            self._staging = self.out_dir

        if self.catalog is not None:
            for artifact in artifacts:
                self.catalog.add_artifact(
                    ArtifactRecord(run_id=record.id, **artifact.model_dump())
                )
            self.catalog.add_metrics(record.id, metrics)
            self.catalog.finish_run(record.id, 0)
        return RunResult(
            run_id=record.id,
            scenario=self.scenario.name,
            mode=self.scenario.mode,
            out_dir=str(self.out_dir),
            artifacts=artifacts,
            metrics=metrics,
        )

    def _record_failure(self, run_id: str, exit_code: int, message: str) -> None:
        if self.catalog is not None:
            self.catalog.finish_run(run_id, exit_code, message)

    def _staged_artifacts(self) -> List[Artifact]:
        return [
            Artifact(path=p.name, sha256=file_digest(p), bytes=p.stat().st_size)
            for p in sorted(self._staging.iterdir())
            if p.is_file()
        ]

    def _write_manifest(self) -> None:
        manifest = {
            "scenario": self.scenario.name,
            "mode": self.scenario.mode,
            "created": datetime.now(timezone.utc).isoformat(),
            "tool_version": __version__,
            "config_sha256": self.scenario.config_sha256,
            "seed": self.seed,
            "artifacts": [a.model_dump() for a in self._staged_artifacts()],
        }
        write_json(self._path(self.scenario.outputs.manifest), manifest)

    def _publish(self) -> List[Artifact]:
        artifacts = self._staged_artifacts()
        for artifact in artifacts:
            os.replace(self._staging / artifact.path, self.out_dir / artifact.path)
        return artifacts

    def _gains(self, default: float) -> np.ndarray:
        sweep = self.scenario.sweep
        if sweep is None:
            return np.array([default])
        values = sweep.grid()
        if sweep.variable == "gain":
            return values
        if sweep.variable == "gamma_eff_hz":
            gains = TWO_PI * values / self.scenario.build_oscillator().gamma_m - 1.0
            if np.any(gains < 0.0):
                raise ConfigError("sweep values below the intrinsic linewidth give negative gain")
            return gains
        raise ConfigError(f"sweep.variable {sweep.variable} does not set a feedback gain")

    def _run_analytic_budget(self) -> Dict[str, float]:
        scenario = self.scenario
        sweep = scenario.sweep
        if sweep is None:
            variable = "point"
            grid = np.array([math.nan])
            budgets = [scenario.build_budget()]
        elif sweep.variable == "n_c":
            variable, grid = "n_c", sweep.grid()
            budgets = [scenario.build_budget(n_c=v) for v in grid]
        elif sweep.variable == "power_w":
            variable, grid = "power_w", sweep.grid()
            budgets = [scenario.build_budget(power=v) for v in grid]
        else:
            raise ConfigError("analytic-budget sweeps n_c or power_w")

        rows = np.array(
            [
                [
                    x,
                    b.n_imp,
                    b.n_tot,
                    b.product,
                    b.n_ba,
                    b.gamma_meas / TWO_PI,
                    b.gamma_th / TWO_PI,
                ]
                for x, b in zip(grid, budgets)
            ]
        )
        write_csv(
            self._path(scenario.outputs.curves),
            [variable, "n_imp", "n_tot", "product", "n_ba", "gamma_meas_hz", "gamma_th_hz"],
            rows,
        )

        best_index = int(np.nanargmin(rows[:, 3]))
        best = budgets[best_index]
        verdicts = ground_state_conditions(best)
        minimum = minimum_occupancy(best)
        report = {
            "scenario": scenario.name,
            "operating_point": {variable: float(grid[best_index])},
            "budget": best.model_dump(mode="json"),
            "gamma_meas_hz": best.gamma_meas / TWO_PI,
            "gamma_th_hz": best.gamma_th / TWO_PI,
            "rate_ratio": verdicts.rate_ratio,
            "measurement_efficiency": best.measurement_efficiency,
            "imprecision_below_sql_db": best.imprecision_below_sql_db,
            "ground_state": verdicts.model_dump(mode="json"),
            "minimum_occupancy": minimum.model_dump(mode="json"),
        }
        write_json(self._path(scenario.outputs.report), report)
        return {
            "product_min": best.product,
            "gamma_meas_hz": best.gamma_meas / TWO_PI,
            "gamma_th_hz": best.gamma_th / TWO_PI,
            "rate_ratio": verdicts.rate_ratio,
            "n_m_min": minimum.n_m_min,
        }

    def _run_cooling_sweep(self) -> Dict[str, float]:
        scenario = self.scenario
        osc = scenario.build_oscillator()
        budget = scenario.build_budget()
        gains = self._gains(scenario.feedback.gain)
        curve = cooling_sweep(budget, gains, osc.omega_m)
        rows = np.column_stack(
            [
                curve.gamma_eff / TWO_PI,
                curve.gain,
                curve.occupancy_plus_half,
                curve.occupancy_plus_half - 0.5,
                curve.thermal_part,
                curve.imprecision_part,
                curve.within_single_mode_bound.astype(float),
            ]
        )
        write_csv(
            self._path(scenario.outputs.curves),
            [
                "gamma_eff_hz",
                "gain",
                "n_m_plus_half",
                "n_m",
                "thermal_part",
                "imprecision_part",
                "within_single_mode_bound",
            ],
            rows,
        )
        best = int(np.argmin(curve.occupancy_plus_half))
        n_m = float(curve.occupancy_plus_half[best] - 0.5)
        minimum = minimum_occupancy(budget)
        report = {
            "scenario": scenario.name,
            "sweep_minimum": {
                "n_m": n_m,
                "gain": float(curve.gain[best]),
                "gamma_eff_hz": float(curve.gamma_eff[best] / TWO_PI),
                "ground_state_probability": ground_state_probability(max(n_m, 0.0)),
                "within_single_mode_bound": bool(curve.within_single_mode_bound[best]),
            },
            "closed_form": minimum.model_dump(mode="json"),
            "gamma_eff_opt_hz": osc.gamma_m * (1.0 + minimum.g_fb_opt) / TWO_PI,
            "budget": budget.model_dump(mode="json"),
        }
        write_json(self._path(scenario.outputs.report), report)
        return {
            "n_m_min": n_m,
            "gamma_eff_opt_hz": float(curve.gamma_eff[best] / TWO_PI),
            "n_m_min_closed_form": minimum.n_m_min,
        }

    def _run_simulate(self) -> Dict[str, float]:
        scenario = self.scenario
        sim = scenario.simulation
        assert sim is not None
        osc = scenario.build_oscillator()
        rows = []
        for index, gain in enumerate(self._gains(scenario.feedback.gain)):
            config = scenario.build_sim_config(float(gain), self.seed, self.threads)
            trajectories = simulate(config)
            segment = min(sim.segment_length, len(trajectories[0].u))
            psd_u = average_psd(
                [welch_psd(t.u, config.sample_rate, segment, sim.overlap) for t in trajectories]
            )
            psd_y = average_psd(
                [welch_psd(t.y, config.sample_rate, segment, sim.overlap) for t in trajectories]
            )
            n_m_sim = 0.5 * (integrate_variance(psd_u) - 1.0)
            n_m_theory = phonon_occupancy(config.budget, config.fb)
            floor = 2.0 * config.budget.n_imp * zero_point_level(psd_y.unit, osc)
            resonance = int(np.argmin(np.abs(psd_y.omega - osc.omega_m)))
            s_y_res = float(np.mean(psd_y.value[max(resonance - 1, 0) : resonance + 2]))
            rows.append(
                [
                    gain,
                    config.gamma_eff / TWO_PI,
                    n_m_sim,
                    n_m_theory,
                    (n_m_sim + 0.5) / (n_m_theory + 0.5) - 1.0,
                    s_y_res,
                    floor,
                    float(s_y_res < floor),
                ]
            )
            if scenario.outputs.psd:
                write_psd_csv(psd_u, self._path(f"psd_u_{index:02d}.csv"))
                write_psd_csv(psd_y, self._path(f"psd_y_{index:02d}.csv"))
            if scenario.outputs.trajectories:
                trajectories[0].to_csv(self._path(f"trajectory_{index:02d}.csv"))
            logger.info("gain %.4g: n_m simulated %.4g, closed form %.4g", gain, n_m_sim, n_m_theory)

        table = np.array(rows)
        write_csv(
            self._path(scenario.outputs.curves),
            [
                "gain",
                "gamma_eff_hz",
                "n_m_simulated",
                "n_m_theory",
                "relative_error",
                "s_y_resonance",
                "imprecision_floor",
                "squashed",
            ],
            table,
        )
        return {
            "max_relative_error": float(np.max(np.abs(table[:, 4]))),
            "points": float(len(rows)),
        }

    def _load_fit_psd(self) -> Psd:
        fit = self.scenario.fit
        assert fit is not None
        if fit.psd_path is not None:
            return read_psd_csv(self.scenario.resolve(fit.psd_path), fit.unit, fit.n_averages)
        assert fit.trajectory_path is not None
        traj = Trajectory.from_csv(self.scenario.resolve(fit.trajectory_path))
        samples = traj.u if fit.record == "u" else traj.y
        segment = min(fit.segment_length, len(samples))
        return welch_psd(samples, traj.sample_rate, segment, fit.overlap, fit.unit)

    def _run_fit(self) -> Dict[str, float]:
        scenario = self.scenario
        settings = scenario.fit
        assert settings is not None
        osc = scenario.build_oscillator()
        psd = self._load_fit_psd()
        fit = fit_lorentzian(
            psd,
            settings.window_hz,
            weighting=settings.weighting,
            signed_peak=settings.signed_peak,
            max_iterations=settings.max_iterations,
        )
        g0 = TWO_PI * settings.g0_hz if settings.g0_hz else None
        occupancies = phonon = None
        try:
            occupancies = extract_occupancies(fit, osc, g0)
            phonon = phonon_from_spectrum(fit, osc, g0)
        except ConfigError as exc:
            logger.warning("occupancies not extracted: %s", exc)
        report = FitReport(
            fit=fit,
            occupancies=occupancies,
            phonon=phonon,
            input_sha256=psd_digest(psd),
            settings=settings.model_dump(mode="json"),
        )
        write_fit_report(report, self._path(scenario.outputs.report))
        freq, value = psd.select(settings.window_hz)
        write_csv(
            self._path(scenario.outputs.curves),
            ["freq_hz", "psd", "model"],
            np.column_stack([freq, value, fit.evaluate(freq)]),
        )
        metrics = {
            "gamma_eff_hz": fit.gamma_eff / TWO_PI,
            "center_hz": fit.omega_center / TWO_PI,
            "peak": fit.peak,
            "floor": fit.floor,
        }
        if occupancies is not None and phonon is not None:
            metrics.update(n_tot=occupancies.n_tot, n_imp=occupancies.n_imp, n_m=phonon.n_m)
        return metrics

    def _run_calibrate(self) -> Dict[str, float]:
        scenario = self.scenario
        cal = scenario.calibration
        assert cal is not None
        report = CalibrationReport()
        if cal.method == "tone":
            osc = scenario.build_oscillator()
            tone = CalibrationTone(
                beta=cal.beta,
                omega_cal=TWO_PI * cal.tone_frequency_hz,
                transfer_ratio=cal.transfer_ratio,
            )
            n_th = cal.n_th if cal.n_th is not None else thermal_occupancy(osc)
            if cal.source == "synthetic":
                psd = synthetic_tone_psd(
                    osc, scenario.build_chain().g0, n_th, tone, resolution=cal.resolution_hz
                )
            elif cal.psd_path is not None:
                psd = read_psd_csv(scenario.resolve(cal.psd_path), SpectralUnit.VOLTAGE)
            else:
                raise ConfigError("calibration.psd_path is required for file sources")
            f_m = osc.omega_m / TWO_PI
            f_cal = cal.tone_frequency_hz
            peak_window = cal.peak_window_hz or default_peak_window(
                f_m, scenario.build_feedback().gamma_eff(osc.gamma_m) / TWO_PI
            )
            tone_window = cal.tone_window_hz or (
                f_cal - TONE_WINDOW_BINS * cal.resolution_hz,
                f_cal + TONE_WINDOW_BINS * cal.resolution_hz,
            )
            result = calibrate_g0(psd, tone, n_th, peak_window, tone_window)
            report = report.model_copy(
                update={
                    "g0_tone": result,
                    "input_sha256": {"psd": psd_digest(psd)},
                    "windows": {"peak_hz": peak_window, "tone_hz": tone_window},
                }
            )
            metrics = {"g0_hz": result.value / TWO_PI, "g0_err_hz": result.uncertainty / TWO_PI}
        elif cal.method == "spring":
            cav = scenario.build_cavity()
            chain = scenario.build_chain()
            if cal.source == "synthetic":
                if not cal.detunings_hz:
                    raise ConfigError("calibration.detunings_hz is required for synthetic spring data")
                points = synthetic_spring_points(
                    cav, chain, TWO_PI * np.asarray(cal.detunings_hz)
                )
            elif cal.spring_path is not None:
                points = spring_points_from_csv(scenario.resolve(cal.spring_path))
            else:
                raise ConfigError("calibration.spring_path is required for file sources")
            result = g0_from_spring(points, cav, chain)
            report = report.model_copy(update={"g0_spring": result})
            metrics = {"g0_hz": result.value / TWO_PI, "g0_err_hz": result.uncertainty / TWO_PI}
        else:
            if cal.source == "synthetic":
                cav = scenario.build_cavity()
                if not cal.kappas_hz:
                    raise ConfigError("calibration.kappas_hz is required for synthetic splitting data")
                points = synthetic_splitting_points(
                    cav.kappa_0, cav.gamma_split, TWO_PI * np.asarray(cal.kappas_hz)
                )
            elif cal.splitting_path is not None:
                points = mode_splitting_points_from_csv(scenario.resolve(cal.splitting_path))
            else:
                raise ConfigError("calibration.splitting_path is required for file sources")
            splitting = fit_mode_splitting(points)
            report = report.model_copy(update={"mode_splitting": splitting})
            metrics = {
                "kappa_0_hz": splitting.kappa_0 / TWO_PI,
                "splitting_hz": splitting.gamma_split / TWO_PI,
            }
        report.write(self._path(scenario.outputs.report))
        return metrics

    def _run_ringdown(self) -> Dict[str, float]:
        scenario = self.scenario
        settings = scenario.ringdown
        assert settings is not None
        config = scenario.build_sim_config(seed=self.seed, threads=self.threads)
        demod = (
            TWO_PI * settings.demod_frequency_hz
            if settings.demod_frequency_hz
            else config.osc.omega_m
        )
        trajectories = simulate_ringdown_ensemble(
            config, demod, settings.drive_off_time_s, settings.drive_amplitude
        )
        result = fit_ringdown(
            trajectories,
            demod,
            settings.bandwidth_hz,
            start_time=settings.drive_off_time_s,
            settle=settings.settle_s,
        )
        expected = config.gamma_eff
        energy = np.mean(
            [np.abs(lock_in(t, demod, settings.bandwidth_hz)[1]) ** 2 for t in trajectories],
            axis=0,
        )
        stride = max(1, len(energy) // MAX_ENVELOPE_ROWS)
        write_csv(
            self._path(scenario.outputs.curves),
            ["t", "energy"],
            np.column_stack([trajectories[0].t[::stride], energy[::stride]]),
        )
        relative = result.gamma_m / expected - 1.0
        write_json(
            self._path(scenario.outputs.report),
            {
                "scenario": scenario.name,
                "ringdown": result.model_dump(mode="json"),
                "gamma_m_hz": result.gamma_m / TWO_PI,
                "configured_gamma_eff_hz": expected / TWO_PI,
                "relative_error": relative,
            },
        )
        return {"gamma_m_hz": result.gamma_m / TWO_PI, "relative_error": relative}
