import math

import numpy as np
import pytest

from cpscal.errors import ParameterError
from cpscal.thermal import (
    MATERIALS,
    CrossSection,
    Material,
    ThermalSolver,
    crosstalk_at,
    crosstalk_profile,
    crosstalk_table,
    index_change,
    phase_from_power,
    phase_from_temperature,
    phase_slope,
    solve_steady,
    sweep,
    thermo_optic_coeff,
    waveguide_temp,
)


@pytest.fixture(scope="module")
def solver():
    return ThermalSolver()


@pytest.fixture(scope="module")
def field20(solver):
    return solver.solve(20.0)


@pytest.fixture(scope="module")
def table():
    return sweep()


def test_material_table():
    assert MATERIALS["SiO2"].k_hc == 1.38
    assert MATERIALS["TiN"].rho == 5430.0
    with pytest.raises(ParameterError):
        Material("bad", 1.0, 1.0, 0.0)


def test_cross_section_validation():
    with pytest.raises(ParameterError):
        CrossSection(h_int=1.9)
    with pytest.raises(ParameterError):
        CrossSection(h_fine=0.0)


def test_grid_is_mirrored():
    edges = CrossSection().x_edges()
    assert np.allclose(edges, -edges[::-1])
    assert edges[0] == pytest.approx(-25.0)
    assert np.all(np.diff(edges) > 0)


def test_zero_power_is_ambient(solver):
    field = solver.solve(0.0)
    assert np.all(field.temperature == 300.0)
    assert waveguide_temp(field) == pytest.approx(300.0)


def test_negative_power_rejected(solver):
    with pytest.raises(ParameterError):
        solver.solve(-1.0)


def test_field_is_symmetric(field20):
    t = field20.temperature
    assert np.allclose(t, t[:, ::-1], rtol=0, atol=1e-8 * np.max(field20.rise))


def test_maximum_sits_in_heater(field20):
    cs = field20.cross_section
    j, i = np.unravel_index(np.argmax(field20.temperature), field20.temperature.shape)
    assert cs.heater.contains(np.array(field20.x[i]), np.array(field20.y[j]))
    assert field20.temperature.min() >= 300.0 - 1e-9


def test_core_and_heater_are_uniform(field20):
    cs = field20.cross_section
    assert field20.spread_over(cs.waveguide) < 0.5
    # the thin TiN film loses heat at its edges; 0.7 K of a ~10 K rise
    heater_rise = field20.mean_over(cs.heater) - 300.0
    assert field20.spread_over(cs.heater) < 0.8
    assert field20.spread_over(cs.heater) < 0.1 * heater_rise


def test_energy_balance(field20):
    assert field20.energy.relative_error < 0.01
    assert field20.energy.through_bottom > field20.energy.through_top


def test_linear_in_power(solver, field20):
    field40 = solver.solve(40.0)
    assert np.allclose(field40.rise, 2.0 * field20.rise, rtol=1e-8, atol=1e-10)


def test_waveguide_temperature_is_linear(table):
    fit = phase_slope(table, "T_wg_K")
    assert fit.r_squared > 0.999
    assert table["T_wg_K"].iloc[-1] < 600.0
    assert table["T_wg_K"].iloc[0] == pytest.approx(300.0)


def test_phase_power_slope(table):
    fit = phase_slope(table)
    assert fit.slope == pytest.approx(0.1555, rel=0.2)
    assert fit.pi_power == pytest.approx(20.2, rel=0.2)
    assert table["theta_rad"].iloc[0] == pytest.approx(0.0, abs=1e-9)


def test_single_point_phase_matches_sweep(table):
    theta = phase_from_power(power=20.0)
    assert theta == pytest.approx(table.loc[table["P_mW"] == 20.0, "theta_rad"].item(), rel=1e-9)


class TestThermoOptic:
    def test_endpoints(self):
        assert float(thermo_optic_coeff(300.0)) == pytest.approx(1.852e-4, abs=5e-8)
        assert float(thermo_optic_coeff(600.0)) == pytest.approx(2.491e-4, abs=5e-8)

    def test_linear_term_dominates(self):
        t = np.linspace(300.0, 600.0, 31)
        assert np.all(1.49e-10 * t**2 < 3.47e-7 * t)

    def test_extrapolation_warns(self, caplog):
        thermo_optic_coeff(250.0)
        assert "extrapolated" in caplog.text

    def test_index_change_warns_beyond_range(self, caplog):
        index_change(650.0)
        assert "extrapolated" in caplog.text

    def test_in_range_is_silent(self, caplog):
        index_change(450.0)
        assert "extrapolated" not in caplog.text

    def test_index_change_integrates_coefficient(self):
        assert index_change(300.0) == 0.0
        assert index_change(301.0) == pytest.approx(float(thermo_optic_coeff(300.5)), rel=1e-4)

    def test_phase_at_reference_is_zero(self):
        assert phase_from_temperature(300.0) == 0.0


class TestCrosstalk:
    @pytest.fixture(scope="class")
    def profile(self):
        return crosstalk_table(None, 60.0, [0.0, 5.0, 10.0, 20.0, 40.0])

    def test_decays_with_distance(self, profile):
        assert np.all(np.diff(profile["rise_K"]) < 0)

    def test_safe_at_forty_microns(self, profile):
        assert profile["fraction_of_self"].iloc[-1] < 0.05
        assert profile["fraction_of_self"].iloc[0] == 1.0

    def test_single_offset_matches_table(self, profile):
        rise = crosstalk_at(None, 60.0, 40.0)
        assert rise == pytest.approx(profile["rise_K"].iloc[-1], rel=1e-9)

    def test_domain_is_widened(self):
        rise = crosstalk_profile(CrossSection(half_width=20.0), 20.0, [0.0, 30.0])
        assert rise[0] > rise[1] > 0.0


@pytest.mark.slow
def test_grid_convergence():
    coarse = waveguide_temp(ThermalSolver().solve(20.0)) - 300.0
    fine_cs = CrossSection(h_fine=0.025, h_max=0.5)
    fine = waveguide_temp(ThermalSolver(fine_cs).solve(20.0)) - 300.0
    assert abs(fine - coarse) / fine < 0.005
    assert math.isfinite(fine)


def test_solve_steady_matches_solver(field20):
    field = solve_steady(power=20.0)
    assert np.allclose(field.temperature, field20.temperature)
