"""Unit tests for spectral module."""

import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from optocool.core import (
    TWO_PI,
    FeedbackSettings,
    OscillatorParams,
    budget_from_occupancies,
    phonon_occupancy,
)
from optocool.exceptions import ConfigError, FitError
from optocool.spectral import (
    FitReport,
    Psd,
    SpectralUnit,
    SpectrumFit,
    analytic_psd,
    extract_occupancies,
    fit_lorentzian,
    integrate_variance,
    lorentzian,
    phonon_from_spectrum,
    psd_digest,
    read_psd_csv,
    tail_occupancy,
    welch_psd,
    write_fit_report,
    write_psd_csv,
    zero_point_level,
)


def resonance_grid(osc: OscillatorParams, half_width: float, points: int) -> np.ndarray:
    """Frequency grid (Hz) spanning ±half_width (rad/s) around Ω_m."""
    omega = osc.omega_m + np.linspace(-half_width, half_width, points)
    return omega / TWO_PI


@pytest.fixture
def lorentzian_psd() -> Psd:
    freq = np.arange(80.0, 120.0, 0.05)
    value = lorentzian(TWO_PI * freq, TWO_PI * 100.0, TWO_PI * 2.0, 5.0, 0.1)
    return Psd(freq=freq, value=value, resolution=0.05)


class TestPsd:
    def test_negative_values_rejected(self) -> None:
        with pytest.raises(ValidationError):
            Psd(freq=np.arange(3.0), value=np.array([1.0, -1.0, 1.0]), resolution=1.0)

    def test_frequency_must_increase(self) -> None:
        with pytest.raises(ValidationError):
            Psd(freq=np.array([0.0, 2.0, 1.0]), value=np.ones(3), resolution=1.0)

    def test_scaled_and_select(self, lorentzian_psd: Psd) -> None:
        doubled = lorentzian_psd.scaled(2.0)
        np.testing.assert_allclose(doubled.value, 2.0 * lorentzian_psd.value)
        freq, value = lorentzian_psd.select((99.0, 101.0))
        assert freq.min() >= 99.0
        assert freq.max() <= 101.0
        assert len(freq) == len(value)


class TestWelch:
    def test_white_noise_level(self) -> None:
        fs = 1000.0
        samples = np.random.default_rng(0).standard_normal(2**18)
        psd = welch_psd(samples, fs, segment_length=1024)
        assert psd.n_averages == 511
        assert psd.resolution == pytest.approx(fs / 1024)
        interior = psd.value[1:-1]
        tolerance = 3.0 / math.sqrt(psd.n_averages)
        within = np.abs(interior * fs / 2.0 - 1.0) < tolerance
        assert within.mean() > 0.99
        assert np.mean(interior) == pytest.approx(2.0 / fs, rel=0.01)

    def test_variance_round_trip(self) -> None:
        samples = np.random.default_rng(1).normal(scale=3.0, size=2**16)
        psd = welch_psd(samples, 500.0, segment_length=2048)
        assert integrate_variance(psd) == pytest.approx(np.var(samples), rel=0.02)

    def test_tone_power(self) -> None:
        fs = 1000.0
        t = np.arange(2**16) / fs
        samples = 2.0 * np.sin(TWO_PI * 123.4 * t)
        psd = welch_psd(samples, fs, segment_length=1024)
        assert integrate_variance(psd, (100.0, 150.0)) == pytest.approx(2.0, rel=0.02)

    def test_empty_series(self) -> None:
        with pytest.raises(ConfigError, match="empty"):
            welch_psd(np.array([]), 1.0, segment_length=4)

    def test_non_finite_samples(self) -> None:
        with pytest.raises(ConfigError, match="non-finite"):
            welch_psd(np.array([0.0, np.nan, 1.0, 2.0]), 1.0, segment_length=2)

    def test_segment_longer_than_series(self) -> None:
        with pytest.raises(ConfigError, match="segment_length"):
            welch_psd(np.zeros(100), 1.0, segment_length=256)

    def test_overlap_out_of_range(self) -> None:
        with pytest.raises(ConfigError, match="overlap"):
            welch_psd(np.zeros(100), 1.0, segment_length=10, overlap=0.95)


class TestAnalyticSpectra:
    def test_area_is_occupancy(self) -> None:
        osc = OscillatorParams.scaled(1e-3)
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=1e-3)
        psd = analytic_psd(osc, budget, FeedbackSettings(), np.linspace(0.0, 1.0, 1_000_001))
        assert integrate_variance(psd) == pytest.approx(2e3 + 1.0, rel=0.01)

    def test_narrow_band_warns(self, caplog: pytest.LogCaptureFixture) -> None:
        osc = OscillatorParams.scaled(1e-3)
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=1e-3)
        freq = resonance_grid(osc, 2e-3, 401)
        psd = analytic_psd(osc, budget, FeedbackSettings(), freq)
        with caplog.at_level(logging.WARNING, logger="optocool.spectral"):
            integrate_variance(psd)
        assert "band truncation" in caplog.text

    def test_zero_point_levels(self) -> None:
        osc = OscillatorParams.scaled(1e-3)
        assert zero_point_level(SpectralUnit.NORMALIZED, osc) == pytest.approx(4e3)
        assert zero_point_level(SpectralUnit.POSITION, osc) == pytest.approx(4e3)
        assert zero_point_level(SpectralUnit.FREQUENCY, osc, g0=2.0) == pytest.approx(16e3)
        with pytest.raises(ConfigError):
            zero_point_level(SpectralUnit.FREQUENCY, osc)
        with pytest.raises(ConfigError):
            zero_point_level(SpectralUnit.VOLTAGE, osc)


class TestFitLorentzian:
    def test_exact_recovery(self, lorentzian_psd: Psd) -> None:
        fit = fit_lorentzian(lorentzian_psd, (80.0, 120.0))
        assert fit.omega_center == pytest.approx(TWO_PI * 100.0, rel=1e-6)
        assert fit.gamma_eff == pytest.approx(TWO_PI * 2.0, rel=1e-6)
        assert fit.peak == pytest.approx(5.0, rel=1e-6)
        assert fit.floor == pytest.approx(0.1, rel=1e-6)
        assert fit.bins_across == pytest.approx(40.0, rel=1e-5)
        assert not fit.residual_structure
        assert fit.value_at_center == pytest.approx(5.1, rel=1e-6)

    def test_chi2_weighting(self, lorentzian_psd: Psd) -> None:
        fit = fit_lorentzian(lorentzian_psd, (80.0, 120.0), weighting="chi2")
        assert fit.gamma_eff == pytest.approx(TWO_PI * 2.0, rel=1e-6)
        assert fit.weighting == "chi2"

    def test_evaluate_reproduces_data(self, lorentzian_psd: Psd) -> None:
        fit = fit_lorentzian(lorentzian_psd, (80.0, 120.0))
        np.testing.assert_allclose(
            fit.evaluate(lorentzian_psd.freq), lorentzian_psd.value, rtol=1e-6
        )

    def test_flat_data_is_not_resolvable(self) -> None:
        freq = np.linspace(1.0, 2.0, 200)
        psd = Psd(freq=freq, value=np.ones_like(freq), resolution=freq[1] - freq[0])
        with pytest.raises(FitError, match="peak not resolvable"):
            fit_lorentzian(psd, (1.0, 2.0))

    def test_tiny_bump_is_not_resolvable(self) -> None:
        freq = np.linspace(1.0, 2.0, 200)
        value = lorentzian(TWO_PI * freq, TWO_PI * 1.5, 0.2, 1e-4, 1.0)
        psd = Psd(freq=freq, value=value, resolution=freq[1] - freq[0])
        with pytest.raises(FitError, match="peak not resolvable"):
            fit_lorentzian(psd, (1.0, 2.0))

    def test_window_without_bins(self, lorentzian_psd: Psd) -> None:
        with pytest.raises(FitError, match="holds only"):
            fit_lorentzian(lorentzian_psd, (100.0, 100.2))

    def test_iteration_cap(self, lorentzian_psd: Psd) -> None:
        with pytest.raises(FitError, match="did not converge") as excinfo:
            fit_lorentzian(lorentzian_psd, (80.0, 120.0), max_iterations=1)
        assert excinfo.value.last_iterate is not None

    def test_unknown_weighting(self, lorentzian_psd: Psd) -> None:
        with pytest.raises(ConfigError):
            fit_lorentzian(lorentzian_psd, (80.0, 120.0), weighting="poisson")  # type: ignore[arg-type]

    def test_few_bins_across_warns(self, caplog: pytest.LogCaptureFixture) -> None:
        freq = np.arange(95.0, 105.0, 0.05)
        value = lorentzian(TWO_PI * freq, TWO_PI * 100.0, TWO_PI * 0.2, 5.0, 0.1)
        psd = Psd(freq=freq, value=value, resolution=0.05)
        with caplog.at_level(logging.WARNING, logger="optocool.spectral"):
            fit = fit_lorentzian(psd, (95.0, 105.0))
        assert fit.bins_across < 10
        assert "bins across" in caplog.text


class TestOccupancyExtraction:
    def test_open_loop_record(self) -> None:
        osc = OscillatorParams.scaled(1e-3)
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=1.0)
        freq = resonance_grid(osc, 20.0 * osc.gamma_m, 1601)
        psd = analytic_psd(osc, budget, FeedbackSettings(), freq, record="y")
        fit = fit_lorentzian(psd, (freq[0], freq[-1]))
        estimate = extract_occupancies(fit, osc)
        assert estimate.n_tot == pytest.approx(1e3, rel=1e-3)
        assert estimate.n_imp == pytest.approx(1.0, rel=1e-2)
        assert estimate.n_imp_damped == pytest.approx(
            estimate.n_imp * fit.gamma_eff / osc.gamma_m
        )

    def test_zero_point_peak_is_zero_occupancy(self) -> None:
        osc = OscillatorParams.scaled(1e-3)
        s_zp = zero_point_level(SpectralUnit.NORMALIZED, osc)
        fit = SpectrumFit(
            omega_center=1.0,
            gamma_eff=2e-3,
            peak=s_zp / 4.0,
            floor=0.0,
            residual_rms=0.0,
            covariance=np.zeros((4, 4)).tolist(),
            window=(0.1, 0.2),
        )

        estimate = extract_occupancies(fit, osc)

        # peak · (Γ_eff/Γ_m)² = S_zp carries only the half quantum
        assert estimate.n_tot == pytest.approx(0.0, abs=1e-12)
        assert estimate.n_imp == 0.0

    def test_voltage_spectrum_needs_calibration(self, lorentzian_psd: Psd) -> None:
        voltage = lorentzian_psd.model_copy(update={"unit": SpectralUnit.VOLTAGE})
        fit = fit_lorentzian(voltage, (80.0, 120.0))
        osc = OscillatorParams.from_hz(100.0, 0.05, mass=1.0, temperature=0.0)
        with pytest.raises(ConfigError):
            extract_occupancies(fit, osc)

    def test_in_loop_phonon_number(self) -> None:
        osc = OscillatorParams.scaled(1e-5)
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=1e-3)
        fb = FeedbackSettings(gain=100.0, loop="velocity")
        gamma_eff = fb.gamma_eff(osc.gamma_m)
        freq = resonance_grid(osc, 20.0 * gamma_eff, 1601)
        psd = analytic_psd(osc, budget, fb, freq, record="y")
        fit = fit_lorentzian(psd, (freq[0], freq[-1]))
        estimate = phonon_from_spectrum(fit, osc)
        expected = phonon_occupancy(budget, fb)
        assert fit.gamma_eff == pytest.approx(gamma_eff, rel=1e-2)
        assert abs(estimate.n_m - expected) < 2.0 * budget.n_imp + 1e-2 * expected
        assert not estimate.squashing_artifact

    def test_squashed_record(self) -> None:
        osc = OscillatorParams.scaled(1e-7)
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=1e-3)
        fb = FeedbackSettings(gain=4000.0, loop="velocity")
        gamma_eff = fb.gamma_eff(osc.gamma_m)
        freq = resonance_grid(osc, 20.0 * gamma_eff, 1601)
        psd = analytic_psd(osc, budget, fb, freq, record="y")
        window = (freq[0], freq[-1])
        level = 2.0 * zero_point_level(SpectralUnit.NORMALIZED, osc)

        signed = fit_lorentzian(psd, window, signed_peak=True)
        assert signed.peak < 0
        assert signed.gamma_eff == pytest.approx(gamma_eff, rel=0.02)
        assert signed.floor == pytest.approx(level * budget.n_imp, rel=0.01)

        plain = fit_lorentzian(psd, window)
        assert plain.residual_structure

    def test_negative_occupancy_flagged(self) -> None:
        osc = OscillatorParams.scaled(1e-3)
        fit = SpectrumFit(
            omega_center=1.0,
            gamma_eff=1e-3,
            peak=-3.0,
            floor=1.0,
            residual_rms=0.0,
            covariance=np.zeros((4, 4)).tolist(),
            window=(0.1, 0.2),
            signed_peak=True,
        )
        estimate = phonon_from_spectrum(fit, osc)
        assert estimate.n_m < 0
        assert estimate.squashing_artifact

    def test_plain_model_rejects_negative_peak(self) -> None:
        with pytest.raises(ValidationError):
            SpectrumFit(
                omega_center=1.0,
                gamma_eff=1e-3,
                peak=-1.0,
                floor=1.0,
                residual_rms=0.0,
                covariance=np.zeros((4, 4)).tolist(),
                window=(0.1, 0.2),
            )


class TestTailOccupancy:
    @pytest.fixture
    def osc(self) -> OscillatorParams:
        return OscillatorParams.scaled(1e-4)

    def test_off_resonant_tail(self, osc: OscillatorParams) -> None:
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=0.5)
        offsets = np.linspace(25.0, 45.0, 201) * osc.gamma_m
        freq = (osc.omega_m + offsets) / TWO_PI
        psd = analytic_psd(osc, budget, FeedbackSettings(), freq, record="y")
        floor = 2.0 * zero_point_level(SpectralUnit.NORMALIZED, osc) * budget.n_imp
        band = (freq[0], freq[-1])
        assert tail_occupancy(psd, osc, floor, band) == pytest.approx(1e3, rel=0.02)

    def test_band_near_resonance_warns(
        self, osc: OscillatorParams, caplog: pytest.LogCaptureFixture
    ) -> None:
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=0.5)
        freq = resonance_grid(osc, 15.0 * osc.gamma_m, 301)
        psd = analytic_psd(osc, budget, FeedbackSettings(), freq, record="y")
        with caplog.at_level(logging.WARNING, logger="optocool.spectral"):
            tail_occupancy(psd, osc, 0.0, (freq[0], freq[-1]))
        assert "within 10 linewidths" in caplog.text

    def test_empty_band(self, osc: OscillatorParams) -> None:
        budget = budget_from_occupancies(osc.gamma_m, n_tot=1e3, n_imp=0.5)
        freq = resonance_grid(osc, 15.0 * osc.gamma_m, 31)
        psd = analytic_psd(osc, budget, FeedbackSettings(), freq)
        with pytest.raises(ConfigError, match="no bins"):
            tail_occupancy(psd, osc, 0.0, (10.0, 11.0))


class TestSpectrumFiles:
    def test_csv_round_trip(self, lorentzian_psd: Psd, tmp_path: Path) -> None:
        path = tmp_path / "psd.csv"
        write_psd_csv(lorentzian_psd, path)
        assert path.read_text().startswith("freq_hz,psd\n")
        loaded = read_psd_csv(path, n_averages=4)
        np.testing.assert_allclose(loaded.value, lorentzian_psd.value, rtol=1e-11)
        assert loaded.resolution == pytest.approx(0.05)
        assert loaded.n_averages == 4

    def test_csv_with_wrong_header(self, tmp_path: Path) -> None:
        path = tmp_path / "psd.csv"
        path.write_text("f,s\n1,2\n")
        with pytest.raises(ConfigError, match="expected header"):
            read_psd_csv(path)

    def test_digest_tracks_content(self, lorentzian_psd: Psd) -> None:
        assert psd_digest(lorentzian_psd) == psd_digest(lorentzian_psd.scaled(1.0))
        assert psd_digest(lorentzian_psd) != psd_digest(lorentzian_psd.scaled(2.0))

    def test_fit_report(self, lorentzian_psd: Psd, tmp_path: Path) -> None:
        fit = fit_lorentzian(lorentzian_psd, (80.0, 120.0))
        report = FitReport(
            fit=fit, input_sha256=psd_digest(lorentzian_psd), settings={"window_hz": [80, 120]}
        )
        path = tmp_path / "fit.json"
        write_fit_report(report, path)
        data = json.loads(path.read_text())
        assert data["input_sha256"] == psd_digest(lorentzian_psd)
        assert data["fit"]["peak"] == pytest.approx(5.0, rel=1e-6)
        assert data["occupancies"] is None
