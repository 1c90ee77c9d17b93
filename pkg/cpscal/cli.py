"""
cpscal command line.

    cpscal simulate    --scenario s.yaml [--stage J] [--fix J=P ...]
    cpscal calibrate   --scenario s.yaml [--scenario t.yaml ...] [--jobs N]
    cpscal fidelity    --scenario s.yaml [--calibration cal.csv]
    cpscal thermal     [--scenario s.yaml]
    cpscal analyze-mmi [--scenario s.yaml] [--er-bound DB]

Exit codes: 0 success, 1 calibration/solver failure, 2 bad configuration.
"""

from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from cpscal import __version__
from cpscal.analysis import (
    MmiQuality,
    er_port3,
    er_port4,
    er_port4_contour,
    fidelity_campaign,
    min_fidelity_given_er,
)
from cpscal.calibration import CalibrationResult, calibrate
from cpscal.config import MmiAnalysisConfig, Scenario, ThermalConfig, load_scenario
from cpscal.device_sim import Direction, SimulatedDevice
from cpscal.errors import ConfigError, CpsCalError
from cpscal.export import (
    base_manifest,
    calibration_report,
    read_calibration_csv,
    write_csv,
    write_json,
)
from cpscal.log import setup_logging
from cpscal.thermal import (
    ThermalSolver,
    crosstalk_table,
    phase_slope,
    sweep,
    waveguide_temp,
)

logger = logging.getLogger(__name__)
console = Console()
err_console = Console(stderr=True)

# config
SCENARIO_PATH = click.Path(dir_okay=False, path_type=Path)


def _guarded(fn):
    """maps package errors onto the exit-code contract"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            err_console.print(f"[bold red]configuration error:[/] {e}")
            ctx.exit(2)
        except CpsCalError as e:
            err_console.print(f"[bold red]{type(e).__name__}:[/] {e}")
            ctx.exit(1)

    return wrapper


def _common(fn):
    fn = click.option(
        "--out",
        type=click.Path(file_okay=False, path_type=Path),
        envvar="CPSCAL_OUT",
        default="out",
        show_default=True,
        help="output directory (env: CPSCAL_OUT)",
    )(fn)
    fn = click.option("--seed", type=int, default=None, help="override the scenario seed")(fn)
    return fn


def _load(path: Path | None, seed: int | None) -> Scenario:
    if path is None:
        return Scenario.model_validate({"schema": 1, "name": "defaults"})
    scenario = load_scenario(path)
    if seed is not None:
        scenario = scenario.model_copy(update={"seed": seed})
    return scenario


def _stage_table(result: CalibrationResult, title: str) -> Table:
    table = Table(title=title)
    columns = ("stage", "P_min (mW)", "k (rad/mW)", "dtheta (rad)", "dtheta (deg)", "theta", "pass")
    for col in columns:
        table.add_column(col, justify="right")
    for s in result:
        table.add_row(
            str(s.stage),
            f"{s.p_min:.4f}",
            f"{s.k:.4f}",
            f"{s.dtheta:.4f}",
            f"{s.dtheta_deg:.2f}",
            s.theta_at_pmin.value,
            s.source_pass.value + ("*" if result.mode == "nonconstraint" and s.constrained else ""),
        )
    return table


@click.group()
@click.version_option(__version__, prog_name="cpscal")
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def cli(verbose: bool):
    """Pairwise-scan calibration of CPS chains."""
    setup_logging(verbose)


@cli.command()
@click.option("--scenario", "scenario_path", type=SCENARIO_PATH, required=True)
@click.option("--stage", type=int, default=None, help="stage to sweep (default from scenario)")
@click.option("--fix", "fixes", multiple=True, metavar="J=P", help="hold stage J at P mW")
@click.option("--reversed", "reverse", is_flag=True, help="inject light from the other side")
@click.option("--outer", type=int, default=None, help="held stage recorded as P_outer_mW")
@_common
@_guarded
def simulate(scenario_path, stage, fixes, reverse, outer, out, seed):
    """Sweep one stage of the hidden chain and write the I4 trace."""
    scenario = _load(scenario_path, seed)
    chain = scenario.require_chain().to_model()
    instrument = scenario.instrument.to_model(scenario.seed)
    if stage is None:
        stage = scenario.simulate.stage
    if not 1 <= stage <= chain.n_stages:
        raise ConfigError(f"--stage {stage} is outside 1..{chain.n_stages}")

    fixed = {j: 0.0 for j in range(1, chain.n_stages + 1)}
    fixed.update(scenario.simulate.fixed)
    for item in fixes:
        try:
            j, p = item.split("=", 1)
            fixed[int(j)] = float(p)
        except ValueError:
            raise ConfigError(f"--fix expects J=P, got {item!r}") from None

    direction = Direction.REVERSED if reverse else Direction(scenario.simulate.direction)
    if outer is None:
        outer = scenario.simulate.outer
    if outer is not None and not 1 <= outer <= chain.n_stages:
        raise ConfigError(f"--outer {outer} is outside 1..{chain.n_stages}")
    if outer == stage:
        raise ConfigError(f"--outer {outer} is the swept stage")
    trace = SimulatedDevice(chain, instrument).scan(stage, fixed, direction, outer)
    path = write_csv(trace.to_frame(), out / f"{scenario.name}_scan_stage{stage}.csv")
    lo, hi = trace.intensity.min(), trace.intensity.max()
    console.print(f"stage {stage}: I4 in [{lo:.4f}, {hi:.4f}] -> {path}")


def _calibrate_one(path: Path, out: Path, seed: int | None) -> CalibrationResult:
    scenario = _load(path, seed)
    chain = scenario.require_chain().to_model()
    device = SimulatedDevice(chain, scenario.instrument.to_model(scenario.seed))
    logger.info("calibrating %s: %d stages, %s", scenario.name, chain.n_stages, scenario.mode)
    result = calibrate(device, scenario.calibration, scenario.mode)

    write_csv(result.to_frame(), out / f"{scenario.name}_calibration.csv")
    if result.mode == "nonconstraint":
        write_csv(result.to_frame(interior_only=True), out / f"{scenario.name}_interior.csv")
    manifest = base_manifest("calibrate", scenario.name, scenario.seed)
    write_json(out / f"{scenario.name}_report.json", calibration_report(result, manifest))
    return result


@cli.command("calibrate")
@click.option(
    "--scenario",
    "scenario_paths",
    type=click.Path(dir_okay=False, path_type=Path),
    multiple=True,
    required=True,
)
@click.option("--jobs", type=int, default=1, show_default=True, help="parallel scenarios")
@_common
@_guarded
def calibrate_cmd(scenario_paths, jobs, out, seed):
    """Run the pairwise-scan calibration and write Table-2-shaped results."""
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    results: dict[Path, CalibrationResult] = {}
    if jobs == 1 or len(scenario_paths) == 1:
        for p in scenario_paths:
            results[p] = _calibrate_one(p, out, seed)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            futures = {executor.submit(_calibrate_one, p, out, seed): p for p in scenario_paths}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
    for p in scenario_paths:
        console.print(_stage_table(results[p], f"{p.stem} ({results[p].mode})"))


@cli.command()
@click.option("--scenario", "scenario_path", type=SCENARIO_PATH, required=True)
@click.option(
    "--calibration",
    "calibration_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="calibration CSV; calibrates first when omitted",
)
@_common
@_guarded
def fidelity(scenario_path, calibration_path, out, seed):
    """Compare the chip against its calibrated model over full single-stage sweeps."""
    scenario = _load(scenario_path, seed)
    chain = scenario.require_chain().to_model()
    instrument = scenario.instrument.to_model(scenario.seed)
    if calibration_path is not None:
        result = read_calibration_csv(calibration_path)
    else:
        result = calibrate(SimulatedDevice(chain, instrument), scenario.calibration, scenario.mode)

    report = fidelity_campaign(chain, result, instrument)
    cfg = scenario.fidelity
    hist = report.histogram(cfg.bins, cfg.hist_low, cfg.hist_high)
    write_csv(hist, out / f"{scenario.name}_fidelity_hist.csv")
    summary = report.summary()
    summary["fraction_above"] = {str(t): report.fraction_above(t) for t in cfg.thresholds}
    write_json(
        out / f"{scenario.name}_fidelity.json",
        {**base_manifest("fidelity", scenario.name, scenario.seed), **summary},
    )
    console.print(
        f"fidelity: mean {report.mean:.5f}, min {report.min:.5f}, max {report.max:.5f} "
        f"({len(report.values)} points)"
    )


@cli.command()
@click.option("--scenario", "scenario_path", type=SCENARIO_PATH, default=None)
@click.option("--progress", is_flag=True, help="show a progress bar over the power sweep")
@_common
@_guarded
def thermal(scenario_path, progress, out, seed):
    """Solve the heater cross-section: field, power sweep and crosstalk."""
    scenario = _load(scenario_path, seed)
    cfg: ThermalConfig = scenario.thermal
    cs = cfg.cross_section()

    solver = ThermalSolver(cs)
    field = solver.solve(cfg.field_power_mw)
    write_csv(field.to_frame(), out / "thermal_field.csv")

    table = sweep(cs, cfg.powers_mw, cfg.wg_length_um, cfg.wavelength_um, progress)
    write_csv(table, out / "thermal_sweep.csv")
    xt = crosstalk_table(cs, cfg.crosstalk_power_mw, cfg.offsets_um)
    write_csv(xt, out / "thermal_crosstalk.csv")

    payload = base_manifest("thermal", scenario.name, scenario.seed)
    payload["field_power_mW"] = cfg.field_power_mw
    payload["T_wg_K"] = waveguide_temp(field)
    if len(table) >= 2:
        fit = phase_slope(table)
        payload.update(
            slope_rad_per_mW=fit.slope, r_squared=fit.r_squared, pi_power_mW=fit.pi_power
        )
        console.print(
            f"phase slope {fit.slope:.4f} rad/mW (R^2 {fit.r_squared:.5f}), "
            f"pi shift at {fit.pi_power:.2f} mW"
        )
    if field.energy is not None:
        payload["energy_balance"] = {
            "injected_W_per_m": field.energy.injected,
            "outgoing_W_per_m": field.energy.outgoing,
            "relative_error": field.energy.relative_error,
        }
    write_json(out / "thermal.json", payload)


@cli.command("analyze-mmi")
@click.option("--scenario", "scenario_path", type=SCENARIO_PATH, default=None)
@click.option("--er-bound", type=float, default=None, help="extinction-ratio bound, dB")
@_common
@_guarded
def analyze_mmi(scenario_path, er_bound, out, seed):
    """Imbalance, extinction ratios and worst-case fidelity of imperfect MMIs."""
    scenario = _load(scenario_path, seed)
    cfg: MmiAnalysisConfig = scenario.mmi
    bound = er_bound if er_bound is not None else cfg.er_bound_db

    q = MmiQuality.from_transmissions(cfg.t32, cfg.t42)
    quality = pd.DataFrame(
        [
            {
                "t32": cfg.t32,
                "t42": cfg.t42,
                "r": q.r,
                "eta": q.eta,
                "imbalance_dB": q.imbalance_db,
                "er_port3_dB": er_port3(q),
                "er_port4_dB": er_port4(q),
            }
        ]
    )
    write_csv(quality, out / "mmi_quality.csv")

    r_values = np.linspace(cfg.r_min, cfg.r_max, cfg.n_r)
    contours = pd.concat(
        [er_port4_contour(er, r_values) for er in cfg.contour_er_db], ignore_index=True
    )
    write_csv(contours, out / "mmi_contours.csv")

    worst = min_fidelity_given_er(bound, cfg.grid, cfg.n_theta)
    write_csv(
        pd.DataFrame([{"er_bound_dB": bound, "min_fidelity": worst}]),
        out / "mmi_min_fidelity.csv",
    )
    er4 = er_port4(q)
    er4_text = "inf" if math.isinf(er4) else f"{er4:.2f} dB"
    console.print(f"simulated MMI: imbalance {q.imbalance_db:.4f} dB, port-4 ER {er4_text}")
    console.print(f"minimum fidelity at {bound:g} dB: {worst:.6f}")


def main():
    cli()


if __name__ == "__main__":
    main()
