"""Unit tests for cli module."""

from pathlib import Path
from unittest.mock import patch

import pytest

from optocool.cli import build_parser, main
from optocool.database import RunCatalog

SINGULAR_READOUT = """
[scenario]
name = singular
mode = analytic-budget

[oscillator]
frequency_hz = 4.32e6
linewidth_hz = 5.7
temperature_k = 11

[cavity]
kappa_0_hz = 440e6
kappa_ex_hz = 630e6
splitting_hz = 1070e6

[chain]
g0_hz = 19e3
power_w = 1e-6

[budget]
parameterization = physical
"""


@pytest.fixture(autouse=True)
def no_catalog_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("OPTOCOOL_CATALOG", raising=False)


class TestParser:
    def test_run_arguments(self) -> None:
        args = build_parser().parse_args(["run", "figure2", "--seed", "4", "--threads", "2"])

        assert args.command == "run"
        assert args.config == "figure2"
        assert args.seed == 4
        assert args.threads == 2
        assert args.out == "out"

    def test_runs_defaults(self) -> None:
        args = build_parser().parse_args(["runs"])

        assert args.limit == 20
        assert args.scenario is None


class TestMain:
    def test_no_command(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out

    def test_validate_bundled(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["validate", "figure2"]) == 0
        assert "figure2: valid" in capsys.readouterr().out

    def test_validate_invalid(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        path = tmp_path / "bad.cfg"
        path.write_text("[scenario]\nname = bad\nmode = nonsense\n", encoding="utf-8")

        assert main(["validate", str(path)]) == 2
        out = capsys.readouterr().out
        assert "invalid" in out
        assert "scenario.mode" in out

    def test_list_scenarios(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["list-scenarios"]) == 0

        out = capsys.readouterr().out
        assert "figure2" in out
        assert "cooling-sweep" in out
        assert "calibrate_tone" in out

    def test_run(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        out_dir = tmp_path / "out"

        assert main(["run", "headline", "--out", str(out_dir)]) == 0

        out = capsys.readouterr().out
        assert "headline (analytic-budget)" in out
        assert "rate_ratio" in out
        assert (out_dir / "headline.json").is_file()
        assert (out_dir / "manifest.json").is_file()

    def test_run_invalid_config(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        path = tmp_path / "bad.cfg"
        path.write_text("[scenario]\nname = bad\nmode = analytic-budget\n[bogus]\n", encoding="utf-8")

        assert main(["run", str(path), "--out", str(tmp_path / "out")]) == 2
        assert "unknown section" in capsys.readouterr().err

    def test_run_physics_error(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        path = tmp_path / "singular.cfg"
        path.write_text(SINGULAR_READOUT, encoding="utf-8")

        assert main(["run", str(path), "--out", str(tmp_path / "out")]) == 3
        assert "readout singular" in capsys.readouterr().err

    def test_run_io_error(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        with patch("optocool.cli.ScenarioRunner") as runner:
            runner.return_value.run.side_effect = OSError("disk full")

            assert main(["run", "headline", "--out", str(tmp_path)]) == 4

        assert "disk full" in capsys.readouterr().err

    def test_runs_listing(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        catalog = str(tmp_path / "runs.duckdb")
        assert main(["--catalog", catalog, "run", "headline", "--out", str(tmp_path / "a")]) == 0
        assert main(["--catalog", catalog, "run", "figure2", "--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()

        assert main(["--catalog", catalog, "runs", "--scenario", "figure2"]) == 0

        out = capsys.readouterr().out
        assert "figure2" in out
        assert "headline" not in out
        assert "exit=0" in out

    def test_failed_run_catalogued(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        catalog = str(tmp_path / "runs.duckdb")
        path = tmp_path / "singular.cfg"
        path.write_text(SINGULAR_READOUT, encoding="utf-8")

        assert main(["--catalog", catalog, "run", str(path), "--out", str(tmp_path / "out")]) == 3
        assert main(["--catalog", catalog, "runs"]) == 0

        out = capsys.readouterr().out
        assert "failed" in out
        assert "exit=3" in out

    def test_runs_empty(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["runs"]) == 0
        assert "No runs recorded" in capsys.readouterr().out

    def test_run_details(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        catalog = str(tmp_path / "runs.duckdb")
        assert main(["--catalog", catalog, "run", "headline", "--out", str(tmp_path / "a")]) == 0
        with RunCatalog(catalog) as store:
            run_id = store.list_runs()[0].id
        capsys.readouterr()

        assert main(["--catalog", catalog, "runs", "--id", run_id[:8]]) == 0

        out = capsys.readouterr().out
        assert f"Run {run_id}" in out
        assert "Status: ok exit=0" in out
        assert "manifest.json" in out
        assert "rate_ratio = " in out

    def test_run_details_unknown_id(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert main(["runs", "--id", "deadbeef"]) == 1
        assert "No run: deadbeef" in capsys.readouterr().err

    def test_runs_stats(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        catalog = str(tmp_path / "runs.duckdb")
        singular = tmp_path / "singular.cfg"
        singular.write_text(SINGULAR_READOUT, encoding="utf-8")
        assert main(["--catalog", catalog, "run", "headline", "--out", str(tmp_path / "a")]) == 0
        assert main(["--catalog", catalog, "run", str(singular), "--out", str(tmp_path / "b")]) == 3
        capsys.readouterr()

        assert main(["--catalog", catalog, "runs", "--stats"]) == 0

        out = capsys.readouterr().out
        assert "Total runs: 2" in out
        assert "Failed runs: 1" in out
