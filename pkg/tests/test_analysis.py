import math

import numpy as np
import pytest

from cpscal.analysis import (
    INFINITE_ER,
    FidelityReport,
    MmiQuality,
    calibrated_model,
    er_port3,
    er_port4,
    er_port4_contour,
    fidelity,
    fidelity_campaign,
    imbalance_db,
    imbalance_for_er,
    imbalanced_normalized_i4,
    min_fidelity_given_er,
    phase_error_from_slope_spread,
    r_for_er_port3,
)
from cpscal.calibration import (
    CalibrationResult,
    SourcePass,
    StageCalibration,
    ThetaAtPmin,
    calibrate,
)
from cpscal.device_sim import InstrumentModel, SimulatedDevice
from cpscal.errors import ParameterError

from tests.conftest import MEASURED_DTHETA, MEASURED_K, make_chain


def exact_calibration(ks, dthetas) -> CalibrationResult:
    return CalibrationResult(
        tuple(
            StageCalibration(j, k, d, 0.0, 0.0, ThetaAtPmin.ZERO, SourcePass.RIGHT_TO_LEFT)
            for j, (k, d) in enumerate(zip(ks, dthetas), start=1)
        )
    )


@pytest.fixture(scope="module")
def six_calibration():
    return calibrate(SimulatedDevice(make_chain(MEASURED_K, MEASURED_DTHETA)))


class TestFidelity:
    def test_known_value(self):
        assert float(fidelity(0.25, 0.75)) == pytest.approx(math.sqrt(3) / 2)

    def test_identical_intensities(self):
        x = np.linspace(0.0, 1.0, 11)
        assert np.allclose(fidelity(x, x), 1.0)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=200), rng.uniform(size=200)
        f = fidelity(a, b)
        assert np.allclose(f, fidelity(b, a))
        assert np.all((f >= 0.0) & (f <= 1.0))

    def test_orthogonal_outcomes(self):
        assert float(fidelity(0.0, 1.0)) == 0.0

    def test_rejects_out_of_range(self):
        with pytest.raises(ParameterError):
            fidelity(1.2, 0.5)


class TestReport:
    def test_statistics(self):
        report = FidelityReport(np.array([0.998, 0.9992, 0.9996, 1.0]))
        assert report.min == 0.998
        assert report.max == 1.0
        assert report.fraction_above(0.999) == 0.75
        assert report.fractions[0.9995] == 0.5
        assert report.summary()["n"] == 4

    def test_histogram_layout(self):
        report = FidelityReport(np.array([0.9951, 0.9999, 0.5]))
        hist = report.histogram()
        assert list(hist.columns) == ["bin_low", "bin_high", "count"]
        assert len(hist) == 50
        assert hist["bin_low"].iloc[0] == pytest.approx(0.99)
        assert hist["bin_high"].iloc[-1] == pytest.approx(1.0)
        assert hist["count"].sum() == 2

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            FidelityReport(np.array([]))


class TestCampaign:
    def test_exact_calibration_is_perfect(self):
        chain = make_chain(MEASURED_K, MEASURED_DTHETA)
        report = fidelity_campaign(chain, exact_calibration(MEASURED_K, MEASURED_DTHETA))
        assert len(report.values) == 6000
        assert report.min == pytest.approx(1.0, abs=1e-9)

    def test_noiseless_round_trip(self, six_calibration):
        chain = make_chain(MEASURED_K, MEASURED_DTHETA)
        report = fidelity_campaign(chain, six_calibration)
        assert report.mean >= 0.99999
        assert report.fraction_above(0.999) >= 0.99

    def test_bench_noise(self, six_calibration):
        chain = make_chain(MEASURED_K, MEASURED_DTHETA)
        noisy = InstrumentModel(noise_sigma=2e-3, rng_seed=13)
        report = fidelity_campaign(chain, six_calibration, noisy)
        assert report.mean >= 0.9997
        assert report.min >= 0.9968
        assert report.fraction_above(0.999) >= 0.966

    def test_stage_count_mismatch(self):
        chain = make_chain(MEASURED_K, MEASURED_DTHETA)
        with pytest.raises(ParameterError):
            calibrated_model(chain, exact_calibration(MEASURED_K[:3], MEASURED_DTHETA[:3]))


class TestExtinction:
    def test_simulated_mmi_imbalance(self):
        assert imbalance_db(0.4821, 0.4819) == pytest.approx(0.0018, abs=2e-4)

    def test_simulated_mmi_port4(self):
        q = MmiQuality.from_transmissions(0.4821, 0.4819)
        assert q.r == 1.0
        assert er_port4(q) == pytest.approx(73.5, abs=0.5)
        assert q.imbalance_db == pytest.approx(0.0018, abs=2e-4)

    def test_balanced_coupler_is_infinite(self):
        q = MmiQuality.from_transmissions(0.49, 0.49)
        assert er_port4(q) == INFINITE_ER
        assert er_port3(q) == INFINITE_ER

    def test_port3_ignores_splitting(self):
        values = {er_port3(MmiQuality(1.01, eta)) for eta in (0.3, 0.5, 0.7)}
        assert len(values) == 1

    def test_port3_falls_with_asymmetry(self):
        ers = [er_port3(MmiQuality(r, 0.5)) for r in (1.001, 1.01, 1.1)]
        assert ers[0] > ers[1] > ers[2]

    def test_port3_bound_inversion(self):
        r = r_for_er_port3(50.0)
        assert r == pytest.approx(1.006345, abs=1e-6)
        assert er_port3(MmiQuality(r, 0.4)) == pytest.approx(50.0, abs=1e-9)

    def test_imbalance_for_fifty_db(self):
        assert imbalance_for_er(50.0) == pytest.approx(0.0275, abs=2e-4)

    def test_contour_points_meet_their_ratio(self):
        frame = er_port4_contour(45.0, np.linspace(0.98, 1.02, 9))
        for row in frame.itertuples():
            assert er_port4(MmiQuality(row.r, row.eta_low)) == pytest.approx(45.0, abs=0.01)
            assert er_port4(MmiQuality(row.r, row.eta_high)) == pytest.approx(45.0, abs=0.01)

    def test_bad_quality(self):
        with pytest.raises(ParameterError):
            MmiQuality(1.0, 1.0)


def test_normalized_i4_of_ideal_coupler():
    theta = np.linspace(0.0, 2 * math.pi, 50)
    assert np.allclose(imbalanced_normalized_i4(1.0, 0.5, theta), 0.5 * (1 - np.cos(theta)))


class TestWorstCase:
    def test_fifty_db_bound(self):
        assert min_fidelity_given_er(50.0) >= 0.99991

    def test_matches_exhaustive_search(self):
        er = 50.0
        theta = np.linspace(0.0, 2.0 * math.pi, 720, endpoint=False)
        ideal = 0.5 * (1.0 - np.cos(theta))
        eta = np.linspace(0.47, 0.53, 2400)
        worst = 1.0
        for r in np.linspace(1.0, r_for_er_port3(er), 200):
            a = r * (1.0 - eta)
            ok = eta[(a + eta) >= 10.0 ** (er / 20.0) * np.abs(a - eta)]
            if ok.size == 0:
                continue
            norm = imbalanced_normalized_i4(r, ok[:, None], theta)
            worst = min(worst, float(fidelity(np.clip(norm, 0.0, 1.0), ideal).min()))
        assert min_fidelity_given_er(er) == pytest.approx(worst, abs=1e-5)

    def test_refinement_only_lowers(self):
        coarse = min_fidelity_given_er(40.0, n_grid=40, n_theta=360, refine=1)
        refined = min_fidelity_given_er(40.0, n_grid=40, n_theta=360, refine=4)
        assert refined <= coarse

    def test_tighter_bound_is_better(self):
        loose = min_fidelity_given_er(30.0, n_grid=40, n_theta=360)
        tight = min_fidelity_given_er(50.0, n_grid=40, n_theta=360)
        assert loose < tight <= 1.0

    def test_rejects_bad_bound(self):
        with pytest.raises(ParameterError):
            min_fidelity_given_er(0.0)


def test_phase_error_from_slope_spread():
    assert phase_error_from_slope_spread(0.1427, 0.1517, 40.0) == pytest.approx(0.36)
    with pytest.raises(ParameterError):
        phase_error_from_slope_spread(0.14, 0.15, -1.0)
