"""
Calibration quality: intensity fidelity against ground truth, and the MMI
imbalance / extinction-ratio model with its worst-case fidelity search.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from cpscal.calibration import CalibrationResult
from cpscal.device_sim import (
    ChainModel,
    InstrumentModel,
    SimulatedDevice,
    TopsGroundTruth,
    scan_stage,
)
from cpscal.errors import ParameterError

logger = logging.getLogger(__name__)

# extinction ratio of an ideal port; reported as "inf"
INFINITE_ER = math.inf

DEFAULT_THRESHOLDS = (0.999, 0.9995, 0.9999)


def _check_unit(name: str, a: np.ndarray) -> None:
    if np.any(a < -1e-12) or np.any(a > 1.0 + 1e-12):
        raise ParameterError(f"{name} must lie in [0, 1]")


def fidelity(i_exp, i_theory):
    """
    Classical fidelity of two port-4 intensities.

    Examples
    --------
    >>> round(float(fidelity(0.25, 0.75)), 4)
    0.866
    """
    a = np.asarray(i_exp, dtype=np.float64)
    b = np.asarray(i_theory, dtype=np.float64)
    _check_unit("i_exp", a)
    _check_unit("i_theory", b)
    a = np.clip(a, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    f = np.sqrt(a * b) + np.sqrt((1.0 - a) * (1.0 - b))
    return np.clip(f, 0.0, 1.0)


@dataclass(frozen=True)
class FidelityReport:
    values: np.ndarray = field(repr=False)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if len(self.values) == 0:
            raise ParameterError("a fidelity report needs at least one value")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def min(self) -> float:
        return float(np.min(self.values))

    @property
    def max(self) -> float:
        return float(np.max(self.values))

    def fraction_above(self, threshold: float) -> float:
        return float(np.mean(self.values > threshold))

    @property
    def fractions(self) -> dict[float, float]:
        return {t: self.fraction_above(t) for t in self.thresholds}

    def histogram(self, bins: int = 50, lo: float = 0.99, hi: float = 1.0) -> pd.DataFrame:
        counts, edges = np.histogram(self.values, bins=bins, range=(lo, hi))
        return pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:], "count": counts})

    def summary(self) -> dict:
        return {
            "n": int(len(self.values)),
            "mean": self.mean,
            "min": self.min,
            "max": self.max,
            "fraction_above": {str(t): f for t, f in self.fractions.items()},
        }


def calibrated_model(truth: ChainModel, cal: CalibrationResult) -> ChainModel:
    """Ideal-MMI chain built from recovered slopes and phases, on the truth's heaters."""
    if len(cal) != truth.n_stages:
        raise ParameterError(
            f"calibration covers {len(cal)} stages, chain has {truth.n_stages}"
        )
    stages = [
        TopsGroundTruth(k=s.k, dtheta=s.dtheta, resistance=r)
        for s, r in zip(sorted(cal, key=lambda s: s.stage), truth.resistances)
    ]
    return ChainModel.uniform(stages)


def fidelity_campaign(
    truth: ChainModel,
    cal: CalibrationResult,
    instrument: InstrumentModel | None = None,
) -> FidelityReport:
    """
    sweeps every stage over the full DAC range with the others unpowered and
    compare the chip against the calibrated model point by point.
    """
    instrument = instrument or InstrumentModel()
    model = calibrated_model(truth, cal)
    quiet = InstrumentModel(instrument.v_min, instrument.v_max, instrument.v_step)
    device = SimulatedDevice(truth, instrument)

    values = []
    for j in range(1, truth.n_stages + 1):
        rest = {i: 0.0 for i in range(1, truth.n_stages + 1) if i != j}
        measured = device.scan(j, rest)
        expected = scan_stage(model, quiet, j, rest)
        values.append(fidelity(measured.intensity, expected.intensity))
    report = FidelityReport(np.concatenate(values))
    logger.info(
        "fidelity over %d points: mean %.5f, min %.5f, max %.5f",
        len(report.values), report.mean, report.min, report.max,
    )
    return report


def imbalance_db(t_a: float, t_b: float) -> float:
    """
    Examples
    --------
    >>> round(imbalance_db(0.5, 0.25), 4)
    3.0103
    """
    if t_a <= 0 or t_b <= 0:
        raise ParameterError("transmissions must be positive")
    return abs(10.0 * math.log10(t_a / t_b))


def _ratio_db(num: float, den: float) -> float:
    if den == 0.0:
        return INFINITE_ER
    return 20.0 * math.log10(abs(num) / abs(den))


@dataclass(frozen=True)
class MmiQuality:
    """Loss-asymmetry ratio r = exp(-(tau - kappa)/2) and splitting ratio eta."""

    r: float
    eta: float

    def __post_init__(self):
        if self.r <= 0:
            raise ParameterError(f"r must be positive, got {self.r}")
        if not 0.0 < self.eta < 1.0:
            raise ParameterError(f"eta must lie in (0, 1), got {self.eta}")

    @classmethod
    def from_transmissions(cls, t32: float, t42: float) -> MmiQuality:
        """Lossless-asymmetry estimate from the two port-2 transmissions of one MMI."""
        if t32 <= 0 or t42 <= 0:
            raise ParameterError("transmissions must be positive")
        return cls(1.0, t42 / (t32 + t42))

    @property
    def imbalance_db(self) -> float:
        return imbalance_db(1.0 - self.eta, self.eta)


def er_port3(q: MmiQuality) -> float:
    return _ratio_db(q.r + 1.0, q.r - 1.0)


def er_port4(q: MmiQuality) -> float:
    a = q.r * (1.0 - q.eta)
    return _ratio_db(a + q.eta, a - q.eta)


def r_for_er_port3(er_db: float) -> float:
    """
    Examples
    --------
    >>> round(r_for_er_port3(50.0), 6)
    1.006345
    """
    if er_db <= 0:
        raise ParameterError("extinction ratio must be positive")
    big = 10.0 ** (er_db / 20.0)
    return (big + 1.0) / (big - 1.0)


def imbalance_for_er(er_db: float) -> float:
    """Imbalance (dB) of an MMI whose port-4 extinction ratio is er_db at r = 1."""
    if er_db <= 0:
        raise ParameterError("extinction ratio must be positive")
    x = 10.0 ** (-er_db / 20.0)
    return 10.0 * math.log10((1.0 + x) / (1.0 - x))


def _eta_branches(er_db: float, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = 10.0 ** (-er_db / 20.0)
    low = r * (1.0 - x) / (r * (1.0 - x) + (1.0 + x))
    high = r * (1.0 + x) / (r * (1.0 + x) + (1.0 - x))
    return low, high


def er_port4_contour(er_db: float, r_values: Sequence[float]) -> pd.DataFrame:
    """Both splitting ratios that give er_db at port 4 for each r."""
    if er_db <= 0:
        raise ParameterError("extinction ratio must be positive")
    r = np.asarray(r_values, dtype=np.float64)
    if np.any(r <= 0):
        raise ParameterError("r must be positive")
    low, high = _eta_branches(er_db, r)
    return pd.DataFrame({"er_db": er_db, "r": r, "eta_low": low, "eta_high": high})


def imbalanced_normalized_i4(r, eta, theta) -> np.ndarray:
    """I4 / (I3 + I4) of an MZI with two identical imperfect MMIs; only r and eta matter."""
    s = 1.0 / np.asarray(r, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    c = np.cos(theta)
    i3 = eta * (1.0 - eta) * (1.0 + s**2 + 2.0 * s * c)
    i4 = s**2 * ((1.0 - eta) ** 2 + s**2 * eta**2 - 2.0 * s * eta * (1.0 - eta) * c)
    return i4 / (i3 + i4)


def _worst_fidelity(r: np.ndarray, eta: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """minimum over theta, shape of r/eta"""
    ideal = 0.5 * (1.0 - np.cos(theta))
    norm = imbalanced_normalized_i4(r[..., None], eta[..., None], theta)
    return np.min(fidelity(np.clip(norm, 0.0, 1.0), ideal), axis=-1)


def _strip(er_bound: float, r: np.ndarray, u: np.ndarray, eta_range) -> np.ndarray:
    """eta across the admissible strip at each r, u in [0, 1] spans it"""
    low, high = _eta_branches(er_bound, r)
    low = np.maximum(low, eta_range[0])
    high = np.minimum(high, eta_range[1])
    return low[:, None] + (high - low)[:, None] * u[None, :]


def min_fidelity_given_er(
    er_bound: float,
    n_grid: int = 400,
    n_theta: int = 720,
    r_range: tuple[float, float] = (1.0, 1.02),
    eta_range: tuple[float, float] = (0.47, 0.53),
    refine: int = 4,
) -> float:
    """
    Worst fidelity of an MZI whose MMIs meet `er_bound` at both outputs.

    Port 3 bounds r alone, so r runs from 1 to the port-3 limit. At each r
    the port-4 bound leaves a strip of eta between the two contour branches;
    the strip is sampled edge to edge, then the grid is refined around the
    worst point.
    """
    if er_bound <= 0:
        raise ParameterError("extinction-ratio bound must be positive")
    if n_grid < 2 or n_theta < 4:
        raise ParameterError("grid too coarse")
    r_hi = min(r_range[1], r_for_er_port3(er_bound))
    if r_hi < r_range[0]:
        raise ParameterError(f"no r in {r_range} reaches {er_bound} dB at port 3")
    theta = np.linspace(0.0, 2.0 * math.pi, n_theta, endpoint=False)

    r = np.linspace(r_range[0], r_hi, n_grid)
    u = np.linspace(0.0, 1.0, n_grid)
    eta = _strip(er_bound, r, u, eta_range)
    if np.any(eta[:, -1] < eta[:, 0]):
        raise ParameterError(f"no eta in {eta_range} reaches {er_bound} dB at port 4")

    worst = np.empty(eta.shape)
    for i in range(len(r)):
        worst[i] = _worst_fidelity(np.full(len(u), r[i]), eta[i], theta)
    i, j = np.unravel_index(np.argmin(worst), worst.shape)
    best = float(worst[i, j])

    if refine > 1:
        r_loc = np.linspace(r[max(i - 1, 0)], r[min(i + 1, len(r) - 1)], 2 * refine + 1)
        u_loc = np.linspace(u[max(j - 1, 0)], u[min(j + 1, len(u) - 1)], 2 * refine + 1)
        eta_loc = _strip(er_bound, r_loc, u_loc, eta_range)
        fine = _worst_fidelity(np.repeat(r_loc[:, None], len(u_loc), axis=1), eta_loc, theta)
        best = min(best, float(fine.min()))

    logger.debug("worst-case fidelity at %.1f dB: %.7f", er_bound, best)
    return best


def phase_error_from_slope_spread(k_min: float, k_max: float, power: float) -> float:
    """
    Phase mismatch between two heaters driven at the same power.

    Examples
    --------
    >>> round(phase_error_from_slope_spread(0.1427, 0.1517, 40.0), 2)
    0.36
    """
    if power < 0:
        raise ParameterError("power must be >= 0")
    return abs(k_max - k_min) * power
