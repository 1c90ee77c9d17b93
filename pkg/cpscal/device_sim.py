"""
Hidden-truth CPS chain plus the bench instrument that scans it.

Calibration code only talks to `SimulatedDevice`; the `ChainModel` inside it
plays the part of the fabricated chip.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from cpscal.errors import ParameterError, ScopeError
from cpscal.jones_core import IDEAL_MMI, MmiParams, TransferMatrix, mmi_array

logger = logging.getLogger(__name__)

# config
REFERENCE_TEMP_C = 20.0
DEFAULT_RESISTANCE_KOHM = 1.75
HIGH_RES_STEP_V = 0.3e-3

# mean initial phase of the first shifter over six runs per chip temperature
DRIFT_TEMPS_C = (15.0, 20.0, 25.0, 30.0, 35.0, 40.0)
DRIFT_MEAN_DTHETA1 = (0.5073, 0.4847, 0.4665, 0.4506, 0.4377, 0.4166)

# endpoint slope of the table: 5.2 degrees lost between 15 and 40 C
DEFAULT_DRIFT_COEFF = (DRIFT_MEAN_DTHETA1[-1] - DRIFT_MEAN_DTHETA1[0]) / (
    DRIFT_TEMPS_C[-1] - DRIFT_TEMPS_C[0]
)

# outer steps simulated per vectorised block in a pairwise scan
PAIRWISE_BLOCK = 64


class Direction(str, Enum):
    FORWARD = "forward"
    REVERSED = "reversed"


@dataclass(frozen=True)
class TopsGroundTruth:
    k: float
    dtheta: float
    resistance: float = DEFAULT_RESISTANCE_KOHM
    dtheta_temp_coeff: float = 0.0
    label: int = 1

    def __post_init__(self):
        if self.k <= 0:
            raise ParameterError(f"stage {self.label}: slope k must be positive, got {self.k}")
        if self.resistance <= 0:
            raise ParameterError(
                f"stage {self.label}: resistance must be positive, got {self.resistance}"
            )

    @property
    def constrained(self) -> bool:
        return abs(self.dtheta) < math.pi / 2.0


@dataclass(frozen=True)
class ChainModel:
    stages: tuple[TopsGroundTruth, ...]
    mmis: tuple[MmiParams, ...]
    ambient_temp: float = REFERENCE_TEMP_C

    def __post_init__(self):
        if not self.stages:
            raise ParameterError("a chain needs at least one stage")
        if len(self.mmis) != len(self.stages) + 1:
            raise ParameterError(
                f"{len(self.stages)} stages need {len(self.stages) + 1} MMIs, got {len(self.mmis)}"
            )

    @classmethod
    def uniform(
        cls,
        stages: Sequence[TopsGroundTruth],
        mmi: MmiParams = IDEAL_MMI,
        ambient_temp: float = REFERENCE_TEMP_C,
    ) -> ChainModel:
        stages = tuple(replace(s, label=i + 1) for i, s in enumerate(stages))
        return cls(stages, (mmi,) * (len(stages) + 1), ambient_temp)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def lossy(self) -> bool:
        return any(not m.lossless for m in self.mmis)

    @property
    def constrained(self) -> bool:
        return all(s.constrained for s in self.stages)

    @property
    def resistances(self) -> tuple[float, ...]:
        return tuple(s.resistance for s in self.stages)

    def with_ambient(self, ambient_temp: float) -> ChainModel:
        return replace(self, ambient_temp=ambient_temp)

    def phases(self, powers: np.ndarray) -> np.ndarray:
        """stage phases for powers of shape (..., N), in mW"""
        powers = np.asarray(powers, dtype=np.float64)
        k = np.array([s.k for s in self.stages])
        offset = np.array(
            [s.dtheta + s.dtheta_temp_coeff * (self.ambient_temp - REFERENCE_TEMP_C)
             for s in self.stages]
        )
        return k * powers + offset

    def transfer(self, phases: np.ndarray, direction: Direction = Direction.FORWARD) -> np.ndarray:
        """total transfer matrices, shape phases.shape[:-1] + (2, 2)."""
        phases = np.asarray(phases, dtype=np.float64)
        batch = phases.shape[:-1]
        total = np.broadcast_to(mmi_array(self.mmis[0]), batch + (2, 2)).copy()
        for j in range(self.n_stages):
            total[..., 0, :] *= np.exp(1j * phases[..., j])[..., None]
            total = mmi_array(self.mmis[j + 1]) @ total
        if direction is Direction.REVERSED:
            total = np.swapaxes(total, -1, -2)
        return total

    def transfer_matrix(
        self, powers: Mapping[int, float], direction: Direction = Direction.FORWARD
    ) -> TransferMatrix:
        p = _power_row(self.n_stages, powers)
        return TransferMatrix.from_array(self.transfer(self.phases(p), direction))


def _power_row(n: int, powers: Mapping[int, float]) -> np.ndarray:
    missing = [j for j in range(1, n + 1) if j not in powers]
    if missing:
        raise ParameterError(f"no power given for stage(s) {missing}")
    return np.array([float(powers[j]) for j in range(1, n + 1)])


def volts_to_power(v, r: float):
    """P = V^2 / R; volts and kOhm give mW."""
    if r <= 0:
        raise ParameterError(f"resistance must be positive, got {r}")
    return np.square(v) / r


def stage_phase(truth: TopsGroundTruth, p, ambient: float = REFERENCE_TEMP_C):
    return truth.k * p + truth.dtheta + truth.dtheta_temp_coeff * (ambient - REFERENCE_TEMP_C)


def _outputs(chain: ChainModel, powers: np.ndarray, direction: Direction):
    t = chain.transfer(chain.phases(powers), direction)
    # port-2 input picks the second column
    i3 = np.abs(t[..., 0, 1]) ** 2
    i4 = np.abs(t[..., 1, 1]) ** 2
    if chain.lossy:
        total = i3 + i4
        return i3 / total, i4 / total
    return i3, i4


def simulate_output(
    chain: ChainModel, powers: Mapping[int, float], direction: Direction = Direction.FORWARD
) -> tuple[float, float]:
    i3, i4 = _outputs(chain, _power_row(chain.n_stages, powers), direction)
    return float(i3), float(i4)


def fit_drift_coefficient(temps: Sequence[float], dthetas: Sequence[float]) -> float:
    """least-squares slope of initial phase against chip temperature, rad per C"""
    slope, _ = np.polyfit(np.asarray(temps, float), np.asarray(dthetas, float), 1)
    return float(slope)


def random_chain(
    rng: np.random.Generator,
    n_stages: int,
    k_range: tuple[float, float] = (0.12, 0.17),
    dtheta_bound: float = math.pi / 2.0,
    resistance: float = DEFAULT_RESISTANCE_KOHM,
) -> ChainModel:
    stages = [
        TopsGroundTruth(
            k=float(rng.uniform(*k_range)),
            dtheta=float(rng.uniform(-dtheta_bound, dtheta_bound)),
            resistance=resistance,
        )
        for _ in range(n_stages)
    ]
    return ChainModel.uniform(stages)


@dataclass(frozen=True)
class InstrumentModel:
    v_min: float = 0.0
    v_max: float = 10.0
    v_step: float = 0.01
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ParameterError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if self.v_step <= 0:
            raise ParameterError("v_step must be positive")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")

    def high_resolution(self) -> InstrumentModel:
        return replace(self, v_step=HIGH_RES_STEP_V)

    @property
    def n_steps(self) -> int:
        return int(round((self.v_max - self.v_min) / self.v_step))

    def voltages(self) -> np.ndarray:
        return self.v_min + self.v_step * np.arange(1, self.n_steps + 1)

    def powers(self, r: float) -> np.ndarray:
        return volts_to_power(self.voltages(), r)

    def max_power(self, r: float) -> float:
        return float(volts_to_power(self.v_min + self.v_step * self.n_steps, r))

    def quantize_power(self, p: float, r: float) -> float:
        """power the DAC actually delivers when asked for `p`"""
        v = math.sqrt(max(p, 0.0) * r)
        n = round((v - self.v_min) / self.v_step)
        n = min(max(n, 0), self.n_steps)
        return float(volts_to_power(self.v_min + n * self.v_step, r))

    def phase_resolution(self, k: float, r: float) -> float:
        """phase increment of the last step before v_max"""
        top = self.v_min + self.v_step * self.n_steps
        return k * float(volts_to_power(top, r) - volts_to_power(top - self.v_step, r))


@dataclass(frozen=True)
class ScanTrace:
    applied_power: np.ndarray
    intensity: np.ndarray
    stage: int
    fixed_powers: dict[int, float]
    direction: Direction = Direction.FORWARD
    outer_power: float | None = None

    def __post_init__(self):
        if len(self.applied_power) != len(self.intensity):
            raise ParameterError("power and intensity sequences differ in length")
        if np.any(np.diff(self.applied_power) <= 0):
            raise ParameterError("applied power must be strictly increasing")

    @property
    def peak_to_peak(self) -> float:
        return float(np.max(self.intensity) - np.min(self.intensity))

    def to_frame(self) -> pd.DataFrame:
        n = len(self.applied_power)
        outer = np.nan if self.outer_power is None else self.outer_power
        return pd.DataFrame(
            {
                "stage": np.full(n, self.stage),
                "direction": self.direction.value,
                "P_outer_mW": np.full(n, outer),
                "P_inner_mW": self.applied_power,
                "I4": self.intensity,
            }
        )


@dataclass(frozen=True)
class PairwiseTrace:
    outer: int
    inner: int
    direction: Direction
    outer_power: np.ndarray
    u_p: np.ndarray
    mean_intensity: np.ndarray
    inner_power: np.ndarray
    fixed_powers: dict[int, float] = field(default_factory=dict)


def _add_noise(values: np.ndarray, sigma: float, rng: np.random.Generator | None) -> np.ndarray:
    if sigma == 0.0 or rng is None:
        return values
    return np.clip(values + rng.normal(0.0, sigma, size=values.shape), 0.0, 1.0)


def _fixed_row(
    chain: ChainModel, instrument: InstrumentModel, fixed: Mapping[int, float], skip: set[int]
) -> tuple[np.ndarray, dict[int, float]]:
    row = np.zeros(chain.n_stages)
    applied = {}
    for j in range(1, chain.n_stages + 1):
        if j in skip:
            continue
        if j not in fixed:
            raise ParameterError(f"no fixed power given for stage {j}")
        p = instrument.quantize_power(fixed[j], chain.stages[j - 1].resistance)
        row[j - 1] = p
        applied[j] = p
    return row, applied


def scan_stage(
    chain: ChainModel,
    instrument: InstrumentModel,
    target: int,
    fixed: Mapping[int, float],
    direction: Direction = Direction.FORWARD,
    rng: np.random.Generator | None = None,
    outer: int | None = None,
) -> ScanTrace:
    """
    sweeps one stage over the DAC range with every other stage held.

    `outer` names a held stage whose power is recorded on the trace.
    """
    if not 1 <= target <= chain.n_stages:
        raise ParameterError(f"stage {target} outside 1..{chain.n_stages}")
    row, applied = _fixed_row(chain, instrument, fixed, {target})
    sweep = instrument.powers(chain.stages[target - 1].resistance)
    powers = np.tile(row, (len(sweep), 1))
    powers[:, target - 1] = sweep
    _, i4 = _outputs(chain, powers, direction)
    if rng is None and instrument.noise_sigma > 0:
        rng = np.random.default_rng(instrument.rng_seed)
    if outer is not None and outer not in applied:
        raise ParameterError(f"outer stage {outer} is not a held stage")
    return ScanTrace(
        sweep,
        _add_noise(i4, instrument.noise_sigma, rng),
        target,
        applied,
        direction,
        None if outer is None else applied[outer],
    )


def pairwise_trace(
    chain: ChainModel,
    instrument: InstrumentModel,
    outer: int,
    inner: int,
    fixed: Mapping[int, float],
    direction: Direction = Direction.FORWARD,
    k_prior: float = 0.11,
    outer_margin: float = 1.25,
    rng: np.random.Generator | None = None,
    progress: bool = False,
) -> PairwiseTrace:
    """
    nested scan: for every outer step, a full inner sweep, keeping U_P = max - min.

    The outer sweep stops once it covers `outer_margin * pi / k_prior` mW.
    """
    if outer == inner:
        raise ParameterError("outer and inner stage must differ")
    r_out = chain.stages[outer - 1].resistance
    r_in = chain.stages[inner - 1].resistance
    if k_prior * instrument.max_power(r_in) < 2.0 * math.pi:
        raise ScopeError(
            f"inner stage {inner}: {instrument.max_power(r_in):.2f} mW cannot cover 2*pi "
            f"at k >= {k_prior} rad/mW"
        )
    outer_all = instrument.powers(r_out)
    if k_prior * outer_all[-1] < math.pi:
        raise ScopeError(f"outer stage {outer}: scan cannot cover pi at k >= {k_prior} rad/mW")
    outer_powers = outer_all[outer_all <= outer_margin * math.pi / k_prior]
    if len(outer_powers) < len(outer_all):
        outer_powers = outer_all[: len(outer_powers) + 1]

    row, applied = _fixed_row(chain, instrument, fixed, {outer, inner})
    inner_powers = instrument.powers(r_in)
    if rng is None and instrument.noise_sigma > 0:
        rng = np.random.default_rng(instrument.rng_seed)

    u_p = np.empty(len(outer_powers))
    mean = np.empty(len(outer_powers))
    blocks = range(0, len(outer_powers), PAIRWISE_BLOCK)
    for start in tqdm(blocks, desc=f"pair {outer}/{inner}", disable=not progress, leave=False):
        block = outer_powers[start : start + PAIRWISE_BLOCK]
        powers = np.broadcast_to(row, (len(block), len(inner_powers), chain.n_stages)).copy()
        powers[:, :, outer - 1] = block[:, None]
        powers[:, :, inner - 1] = inner_powers[None, :]
        _, i4 = _outputs(chain, powers, direction)
        i4 = _add_noise(i4, instrument.noise_sigma, rng)
        u_p[start : start + len(block)] = i4.max(axis=1) - i4.min(axis=1)
        mean[start : start + len(block)] = i4.mean(axis=1)

    logger.debug(
        "pairwise %s/%s %s: %d outer steps, U_P in [%.4f, %.4f]",
        outer, inner, direction.value, len(outer_powers), u_p.min(), u_p.max(),
    )
    return PairwiseTrace(outer, inner, direction, outer_powers, u_p, mean, inner_powers, applied)


class SimulatedDevice:
    """
    A chip on the bench: the operator knows the heater resistances and the
    instrument, nothing else about the chain.
    """

    def __init__(self, chain: ChainModel, instrument: InstrumentModel | None = None):
        self._chain = chain
        self.instrument = instrument or InstrumentModel()
        self._rng = np.random.default_rng(self.instrument.rng_seed)

    @property
    def n_stages(self) -> int:
        return self._chain.n_stages

    @property
    def resistances(self) -> tuple[float, ...]:
        return self._chain.resistances

    def quantize(self, stage: int, p: float) -> float:
        return self.instrument.quantize_power(p, self.resistances[stage - 1])

    def max_power(self, stage: int) -> float:
        return self.instrument.max_power(self.resistances[stage - 1])

    def measure(
        self, powers: Mapping[int, float], direction: Direction = Direction.FORWARD
    ) -> float:
        row, _ = _fixed_row(self._chain, self.instrument, powers, set())
        _, i4 = _outputs(self._chain, row, direction)
        return float(_add_noise(np.atleast_1d(i4), self.instrument.noise_sigma, self._rng)[0])

    def scan(
        self,
        target: int,
        fixed: Mapping[int, float],
        direction: Direction = Direction.FORWARD,
        outer: int | None = None,
    ) -> ScanTrace:
        return scan_stage(self._chain, self.instrument, target, fixed, direction, self._rng, outer)

    def pairwise(
        self,
        outer: int,
        inner: int,
        fixed: Mapping[int, float],
        direction: Direction = Direction.FORWARD,
        k_prior: float = 0.11,
        outer_margin: float = 1.25,
        progress: bool = False,
    ) -> PairwiseTrace:
        return pairwise_trace(
            self._chain, self.instrument, outer, inner, fixed, direction,
            k_prior=k_prior, outer_margin=outer_margin, rng=self._rng, progress=progress,
        )
