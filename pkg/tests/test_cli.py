import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from cpscal import __version__
from cpscal.cli import cli

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

TWO_STAGE = {
    "schema": 1,
    "name": "pair",
    "seed": 4,
    "chain": {"stages": [{"k": 0.14, "dtheta": 0.4}, {"k": 0.15, "dtheta": -0.2}]},
    "fidelity": {"bins": 10},
}


@pytest.fixture
def runner():
    return CliRunner()


def write_scenario(tmp_path: Path, data: dict, name: str = "scenario.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_simulate_writes_trace(runner, tmp_path):
    result = runner.invoke(
        cli, ["simulate", "--scenario", str(SCENARIOS / "six_cps.yaml"), "--out", str(tmp_path)]
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(tmp_path / "six_cps_scan_stage5.csv")
    assert list(frame.columns) == ["stage", "direction", "P_outer_mW", "P_inner_mW", "I4"]
    assert len(frame) == 1000
    assert (frame["stage"] == 5).all()
    assert (frame["direction"] == "forward").all()
    assert frame["P_outer_mW"].iloc[0] == pytest.approx(16.4435, abs=0.06)
    # stage 6 held at its dip: sweeping stage 5 barely moves port 4
    assert frame["I4"].max() - frame["I4"].min() < 0.05


def test_simulate_single_stage_cosine(runner, tmp_path):
    path = write_scenario(
        tmp_path, {"schema": 1, "name": "one", "chain": {"stages": [{"k": 0.15, "dtheta": -0.3}]}}
    )
    result = runner.invoke(cli, ["simulate", "--scenario", str(path), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(tmp_path / "one_scan_stage1.csv")
    assert frame["P_outer_mW"].isna().all()
    expected = 0.5 * (1 - np.cos(0.15 * frame["P_inner_mW"] - 0.3))
    assert np.allclose(frame["I4"], expected, atol=1e-7)


def test_simulate_is_deterministic(runner, tmp_path):
    args = ["simulate", "--scenario", str(SCENARIOS / "six_cps.yaml"), "--stage", "2"]
    runner.invoke(cli, [*args, "--out", str(tmp_path / "a")])
    runner.invoke(cli, [*args, "--out", str(tmp_path / "b")])
    first = (tmp_path / "a" / "six_cps_scan_stage2.csv").read_bytes()
    assert first == (tmp_path / "b" / "six_cps_scan_stage2.csv").read_bytes()


def test_out_from_environment(runner, tmp_path):
    result = runner.invoke(
        cli,
        ["simulate", "--scenario", str(SCENARIOS / "six_cps.yaml")],
        env={"CPSCAL_OUT": str(tmp_path / "env")},
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "env" / "six_cps_scan_stage5.csv").exists()


def test_bad_fix_is_a_config_error(runner, tmp_path):
    result = runner.invoke(
        cli,
        ["simulate", "--scenario", str(SCENARIOS / "six_cps.yaml"), "--fix", "six", "--out",
         str(tmp_path)],
    )
    assert result.exit_code == 2


def test_unknown_key_exits_two(runner, tmp_path):
    path = write_scenario(tmp_path, {**TWO_STAGE, "colour": "blue"})
    result = runner.invoke(cli, ["calibrate", "--scenario", str(path), "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert not (tmp_path / "pair_calibration.csv").exists()


def test_missing_scenario_exits_two(runner, tmp_path):
    missing = tmp_path / "nope.yaml"
    result = runner.invoke(cli, ["calibrate", "--scenario", str(missing), "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_calibrate_then_fidelity(runner, tmp_path):
    path = write_scenario(tmp_path, TWO_STAGE)
    result = runner.invoke(cli, ["calibrate", "--scenario", str(path), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output

    table = pd.read_csv(tmp_path / "pair_calibration.csv")
    assert list(table["stage"]) == [1, 2]
    assert table["k_rad_per_mW"].tolist() == pytest.approx([0.14, 0.15], abs=2e-3)

    report = json.loads((tmp_path / "pair_report.json").read_text())
    assert report["schema_version"] == 1
    assert report["mode"] == "constrained"
    assert report["seed"] == 4

    result = runner.invoke(
        cli,
        ["fidelity", "--scenario", str(path), "--calibration",
         str(tmp_path / "pair_calibration.csv"), "--out", str(tmp_path)],
    )
    assert result.exit_code == 0, result.output
    hist = pd.read_csv(tmp_path / "pair_fidelity_hist.csv")
    assert len(hist) == 10
    summary = json.loads((tmp_path / "pair_fidelity.json").read_text())
    assert summary["mean"] > 0.999


def test_calibrate_without_chain_exits_two(runner, tmp_path):
    path = write_scenario(tmp_path, {"schema": 1, "name": "empty"})
    result = runner.invoke(cli, ["calibrate", "--scenario", str(path), "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_analyze_mmi_balanced_coupler(runner, tmp_path):
    path = write_scenario(
        tmp_path,
        {"schema": 1, "name": "mmi", "mmi": {"t32": 0.49, "t42": 0.49, "grid": 12, "n_theta": 90}},
    )
    result = runner.invoke(cli, ["analyze-mmi", "--scenario", str(path), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "inf" in (tmp_path / "mmi_quality.csv").read_text()
    quality = pd.read_csv(tmp_path / "mmi_quality.csv")
    assert math.isinf(quality["er_port4_dB"].item())
    worst = pd.read_csv(tmp_path / "mmi_min_fidelity.csv")
    assert 0.999 < worst["min_fidelity"].item() <= 1.0
    assert not pd.read_csv(tmp_path / "mmi_contours.csv").empty


def test_thermal_small_sweep(runner, tmp_path):
    path = write_scenario(
        tmp_path,
        {
            "schema": 1,
            "name": "heat",
            "thermal": {"powers_mw": [0, 20, 40], "offsets_um": [0, 20]},
        },
    )
    result = runner.invoke(cli, ["thermal", "--scenario", str(path), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    payload = json.loads((tmp_path / "thermal.json").read_text())
    assert payload["slope_rad_per_mW"] > 0.0
    assert payload["energy_balance"]["relative_error"] < 0.01
    assert len(pd.read_csv(tmp_path / "thermal_sweep.csv")) == 3
    assert len(pd.read_csv(tmp_path / "thermal_crosstalk.csv")) == 2


@pytest.mark.parametrize("flag", ["--stage", "--outer"])
def test_explicit_zero_stage_is_rejected(runner, tmp_path, flag):
    result = runner.invoke(
        cli,
        ["simulate", "--scenario", str(SCENARIOS / "six_cps.yaml"), flag, "0", "--out",
         str(tmp_path)],
    )
    assert result.exit_code == 2
    assert not list(tmp_path.glob("*.csv"))
