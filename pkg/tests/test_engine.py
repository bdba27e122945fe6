"""Unit tests for engine module."""

import logging
import math
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import signal

from optocool.core import (
    FeedbackSettings,
    NoiseBudget,
    OscillatorParams,
    budget_from_occupancies,
    minimum_occupancy,
    phonon_occupancy,
)
from optocool.engine import (
    FeedbackFilter,
    SimConfig,
    Trajectory,
    default_drive_amplitude,
    feedback_filter,
    simulate,
    simulate_ringdown,
)
from optocool.exceptions import ConfigError, LoopUnstableError
from optocool.spectral import analytic_psd


def desk_config(
    gamma_ratio: float = 1e-2,
    n_tot: float = 10.0,
    n_imp: float = 1e-2,
    **kwargs: Any,
) -> SimConfig:
    osc = OscillatorParams.scaled(gamma_ratio)
    budget = budget_from_occupancies(osc.gamma_m, n_tot=n_tot, n_imp=n_imp)
    settings: Dict[str, Any] = {"dt": 0.02, "duration": 200.0, "seed": 11}
    settings.update(kwargs)
    return SimConfig(osc=osc, budget=budget, **settings)


class TestSimConfig:
    def test_coarse_step_rejected(self) -> None:
        with pytest.raises(ValidationError, match="exceeds"):
            desk_config(dt=0.5)

    def test_marginal_step_warns(self, caplog: pytest.LogCaptureFixture) -> None:
        with caplog.at_level(logging.WARNING, logger="optocool.engine"):
            desk_config(dt=0.03)
        assert "dt·Ω_m" in caplog.text

    def test_burn_in_must_be_shorter_than_duration(self) -> None:
        with pytest.raises(ValidationError):
            desk_config(duration=100.0, burn_in=100.0)

    def test_unknown_integrator(self) -> None:
        with pytest.raises(ValidationError, match="Unknown integrator"):
            desk_config(integrator="leapfrog")

    def test_step_counts(self) -> None:
        config = desk_config(dt=0.02, duration=100.0, burn_in=10.0)
        assert config.n_steps == 5000
        assert config.n_burn == 500
        assert config.sample_rate == pytest.approx(50.0)

    def test_statistics_issues(self) -> None:
        short = desk_config(duration=100.0, burn_in=10.0)
        assert len(short.statistics_issues()) == 2
        long = desk_config(duration=5000.0, burn_in=1000.0)
        assert long.statistics_issues() == []


class TestTrajectory:
    @pytest.fixture
    def trajectory(self) -> Trajectory:
        t = np.arange(50) * 0.02
        rng = np.random.default_rng(3)
        return Trajectory(t=t, u=rng.normal(size=50), y=rng.normal(size=50), f_fb=np.zeros(50))

    def test_unequal_columns_rejected(self) -> None:
        with pytest.raises(ValidationError):
            Trajectory(t=np.arange(3.0), u=np.zeros(3), y=np.zeros(2), f_fb=np.zeros(3))

    def test_non_uniform_sampling_rejected(self) -> None:
        t = np.array([0.0, 1.0, 2.5, 3.0])
        with pytest.raises(ValidationError):
            Trajectory(t=t, u=np.zeros(4), y=np.zeros(4), f_fb=np.zeros(4))

    def test_csv_round_trip(self, trajectory: Trajectory, tmp_path: Path) -> None:
        path = tmp_path / "traj.csv"
        trajectory.to_csv(path)
        assert path.read_text().splitlines()[0] == "t,u,y,f_fb"
        loaded = Trajectory.from_csv(path)
        np.testing.assert_allclose(loaded.columns(), trajectory.columns(), rtol=1e-11)

    def test_binary_round_trip_is_exact(self, trajectory: Trajectory, tmp_path: Path) -> None:
        path = tmp_path / "traj.bin"
        trajectory.to_binary(path)
        assert path.stat().st_size == 64 + 4 * 50 * 8
        loaded = Trajectory.from_binary(path)
        np.testing.assert_array_equal(loaded.columns(), trajectory.columns())

    def test_csv_with_wrong_header(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.csv"
        path.write_text("time,x\n0,1\n")
        with pytest.raises(ConfigError, match="expected header"):
            Trajectory.from_csv(path)

    def test_binary_with_wrong_magic(self, trajectory: Trajectory, tmp_path: Path) -> None:
        path = tmp_path / "bad.bin"
        trajectory.to_binary(path)
        raw = bytearray(path.read_bytes())
        raw[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(raw))
        with pytest.raises(ConfigError):
            Trajectory.from_binary(path)


class TestFeedbackFilter:
    def test_quarter_period_delay_leads_by_quarter_cycle(self) -> None:
        osc = OscillatorParams.scaled(1e-2)
        fb = FeedbackSettings.quarter_period_delay(osc, gain=1.0)
        loop = feedback_filter(fb, sample_rate=100.0, omega_m=osc.omega_m)
        response = loop.transfer(np.array([osc.omega_m]))[0]
        assert abs(response) == pytest.approx(1.0, rel=1e-6)
        assert np.angle(response) == pytest.approx(math.pi / 2, abs=0.01)

    def test_streaming_matches_batch(self) -> None:
        fb = FeedbackSettings(gain=1.0, delay=0.37)
        samples = np.random.default_rng(5).normal(size=500)
        loop = FeedbackFilter(fb, 100.0, 1.0)
        streamed = np.array([loop.process(x) for x in samples])
        loop.reset()
        np.testing.assert_allclose(streamed, loop.apply(samples), rtol=1e-10, atol=1e-14)

    def test_delay_shorter_than_sample(self) -> None:
        with pytest.raises(ConfigError, match="shorter than one sample"):
            FeedbackFilter(FeedbackSettings(gain=1.0, delay=1e-3), 100.0, 1.0)

    def test_center_above_nyquist(self) -> None:
        fb = FeedbackSettings(gain=1.0, delay=1.0, bandpass_center=1000.0)
        with pytest.raises(ConfigError, match="Nyquist"):
            FeedbackFilter(fb, 100.0, 1.0)

    def test_center_required_without_oscillator(self) -> None:
        with pytest.raises(ConfigError):
            feedback_filter(FeedbackSettings(gain=1.0, delay=1.0), 100.0)


class TestSimulate:
    def test_same_seed_is_reproducible(self) -> None:
        config = desk_config(n_trajectories=2)
        first = simulate(config)
        second = simulate(config)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.columns(), b.columns())

    def test_different_seeds_differ(self) -> None:
        a = simulate(desk_config(seed=1))[0]
        b = simulate(desk_config(seed=2))[0]
        assert not np.array_equal(a.u, b.u)

    def test_thread_count_does_not_change_results(self) -> None:
        osc = OscillatorParams.scaled(1e-2)
        fb = FeedbackSettings.quarter_period_delay(osc, gain=2.0)
        serial = simulate(desk_config(fb=fb, n_trajectories=3, threads=1))
        pooled = simulate(desk_config(fb=fb, n_trajectories=3, threads=3))
        for a, b in zip(serial, pooled):
            np.testing.assert_array_equal(a.columns(), b.columns())

    def test_burn_in_is_discarded(self) -> None:
        trajectory = simulate(desk_config(duration=100.0, burn_in=20.0))[0]
        assert len(trajectory.t) == 4000
        assert trajectory.t[0] == pytest.approx(20.0)

    def test_free_decay_without_noise(self) -> None:
        gamma = 1e-2
        config = desk_config(gamma_ratio=gamma, noise=False, initial_u=1.0, duration=300.0)
        trajectory = simulate(config)[0]
        t = trajectory.t
        shifted = math.sqrt(1.0 - gamma**2 / 4.0)
        expected = np.exp(-gamma * t / 2.0) * (
            np.cos(shifted * t) + gamma / (2.0 * shifted) * np.sin(shifted * t)
        )
        np.testing.assert_allclose(trajectory.u, expected, atol=1e-9)
        np.testing.assert_array_equal(trajectory.y, trajectory.u)

    def test_open_loop_variance(self) -> None:
        config = desk_config(duration=10_000.0, burn_in=500.0, n_trajectories=8)
        u = np.concatenate([trajectory.u for trajectory in simulate(config)])
        assert np.var(u) == pytest.approx(2.0 * 10.0 + 1.0, rel=0.2)

    def test_velocity_loop_variance(self) -> None:
        fb = FeedbackSettings(gain=4.0, loop="velocity")
        config = desk_config(fb=fb, duration=10_000.0, burn_in=500.0, n_trajectories=4)
        u = np.concatenate([trajectory.u for trajectory in simulate(config)])
        expected = 2.0 * phonon_occupancy(config.budget, fb) + 1.0
        assert np.var(u) == pytest.approx(expected, rel=0.12)

    def test_imprecision_variance(self) -> None:
        config = desk_config(duration=10_000.0, burn_in=500.0, n_trajectories=4)
        noise = np.concatenate([tr.y - tr.u for tr in simulate(config)])
        expected = 4.0 * config.budget.n_imp / (config.osc.gamma_m * config.dt)
        assert np.var(noise) == pytest.approx(expected, rel=0.02)

    def test_anti_damping_delay_is_unstable(self) -> None:
        fb = FeedbackSettings(gain=50.0, delay=math.pi / 2.0, loop="delay")
        config = desk_config(fb=fb, dt=0.01, duration=300.0)
        with pytest.raises(LoopUnstableError, match="loop unstable"):
            simulate(config)

    def test_delay_loop_cools(self) -> None:
        osc = OscillatorParams.scaled(1e-2)
        fb = FeedbackSettings.quarter_period_delay(osc, gain=4.0)
        config = desk_config(
            fb=fb, n_imp=1e-4, duration=3000.0, burn_in=300.0, n_trajectories=2
        )
        u = np.concatenate([trajectory.u for trajectory in simulate(config)])
        assert np.var(u) < 0.5 * (2.0 * 10.0 + 1.0)


class TestRingdown:
    def test_driven_amplitude_without_noise(self) -> None:
        config = desk_config(noise=False, duration=1500.0)
        amplitude = 1.0
        trajectory = simulate_ringdown(
            config, 1.0, drive_off_time=1500.0, drive_amplitude=amplitude
        )
        assert trajectory.t[0] == 0.0
        assert len(trajectory.t) == config.n_steps
        steady = np.max(np.abs(trajectory.u[trajectory.t > 1400.0]))
        assert steady == pytest.approx(amplitude / config.osc.gamma_m, rel=0.01)

    def test_drive_stops_at_shutter_time(self) -> None:
        config = desk_config(noise=False, duration=400.0)
        trajectory = simulate_ringdown(config, 1.0, drive_off_time=200.0)
        envelope = np.abs(signal.hilbert(trajectory.u))
        before = envelope[(trajectory.t > 240.0) & (trajectory.t < 260.0)].mean()
        after = envelope[(trajectory.t > 340.0) & (trajectory.t < 360.0)].mean()
        assert after / before == pytest.approx(math.exp(-0.01 * 100.0 / 2.0), rel=0.01)

    def test_default_drive_amplitude(self) -> None:
        config = desk_config()
        thermal = math.sqrt(2.0 * 10.0 + 1.0)
        assert default_drive_amplitude(config) == pytest.approx(100.0 * thermal * 1e-2)

    def test_drive_off_beyond_duration(self) -> None:
        with pytest.raises(ConfigError):
            simulate_ringdown(desk_config(), 1.0, drive_off_time=1e4)


@pytest.mark.slow
class TestCoolingAgainstTheory:
    """Simulated occupancies against the closed form at desk scale."""

    @pytest.fixture
    def budget(self) -> NoiseBudget:
        return budget_from_occupancies(1e-3, n_tot=1e3, n_imp=1e-3)

    @pytest.mark.parametrize("gain", [100.0, 1000.0, 10_000.0])
    def test_velocity_loop_occupancy(self, budget: NoiseBudget, gain: float) -> None:
        osc = OscillatorParams.scaled(1e-3)
        fb = FeedbackSettings(gain=gain, loop="velocity")
        gamma_eff = fb.gamma_eff(osc.gamma_m)
        config = SimConfig(
            osc=osc,
            budget=budget,
            fb=fb,
            dt=0.01,
            duration=10_000.0 + 20.0 / gamma_eff,
            burn_in=20.0 / gamma_eff,
            n_trajectories=3,
            seed=20240601,
        )
        u = np.concatenate([trajectory.u for trajectory in simulate(config)])
        expected = phonon_occupancy(budget, fb) + 0.5
        assert np.mean(u**2) / 2.0 == pytest.approx(expected, rel=0.1)

    def test_record_squashed_above_optimal_gain(self, budget: NoiseBudget) -> None:
        osc = OscillatorParams.scaled(1e-3)
        gain = 10.0 * minimum_occupancy(budget).g_fb_opt
        fb = FeedbackSettings(gain=gain, loop="velocity")
        config = SimConfig(
            osc=osc, budget=budget, fb=fb, dt=0.01, duration=2000.0, burn_in=50.0, seed=3
        )
        y = simulate(config)[0].y
        freq, psd = signal.welch(y, fs=config.sample_rate, nperseg=16384)
        floor = 8.0 * budget.n_imp / osc.gamma_m
        near = np.abs(freq - 1.0 / (2.0 * math.pi)) < 0.01
        assert np.mean(psd[near]) < 0.5 * floor
        assert np.median(psd[freq > 30.0]) == pytest.approx(floor, rel=0.05)

    def test_record_meets_floor_at_optimal_gain(self, budget: NoiseBudget) -> None:
        # (1 + g_opt)² = 1 + (n_tot + 1/2)/n_imp puts S_y(Ω_m) on the floor
        osc = OscillatorParams.scaled(1e-3)
        fb = FeedbackSettings(gain=minimum_occupancy(budget).g_fb_opt, loop="velocity")
        config = SimConfig(
            osc=osc, budget=budget, fb=fb, dt=0.01, duration=8000.0, burn_in=50.0, seed=5
        )
        y = simulate(config)[0].y
        freq, psd = signal.welch(y, fs=config.sample_rate, nperseg=16384)
        floor = 8.0 * budget.n_imp / osc.gamma_m
        f_m = 1.0 / (2.0 * math.pi)
        near = np.abs(freq - f_m) < 0.1
        expected = analytic_psd(osc, budget, fb, freq[near], record="y").value
        on_resonance = analytic_psd(osc, budget, fb, np.array([f_m, f_m + 1.0]), record="y")
        assert on_resonance.value[0] == pytest.approx(floor, rel=1e-9)
        assert np.mean(psd[near]) == pytest.approx(np.mean(expected), rel=0.1)
        assert np.median(psd[freq > 30.0]) == pytest.approx(floor, rel=0.05)

    def test_open_loop_occupancy(self, budget: NoiseBudget) -> None:
        osc = OscillatorParams.scaled(1e-3)
        second_moments = []
        for seed in range(20):
            config = SimConfig(
                osc=osc, budget=budget, dt=0.04, duration=1.1e5, burn_in=1e4, seed=seed
            )
            second_moments.append(np.mean(simulate(config)[0].u ** 2))
        assert np.mean(second_moments) == pytest.approx(2.0 * 1e3 + 1.0, rel=0.12)
