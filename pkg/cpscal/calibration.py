"""
Pairwise-scan calibration of CPS chains.

Primitives (extrema detection, branch-corrected unwrapping, line fits, phase
resolution) come first; the pass orchestration for 1-, 2-, even and odd
chains and the constraint-free discriminators follow.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from scipy.stats import linregress

from cpscal.config import CalibrationConfig
from cpscal.device_sim import (
    ChainModel,
    Direction,
    InstrumentModel,
    PairwiseTrace,
    SimulatedDevice,
    fit_drift_coefficient,
)
from cpscal.errors import (
    ConstraintViolationError,
    DiscriminationError,
    FitError,
    ParameterError,
    PassInconsistencyError,
    ScopeError,
    UnwrapError,
)

logger = logging.getLogger(__name__)

# config
TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# arc-function arguments beyond this are dropped from line fits
ARC_ENDPOINT = 0.999
# a step may exceed the expected phase increment by this factor
UNWRAP_JUMP_FACTOR = 3.0


class ThetaAtPmin(str, Enum):
    ZERO = "zero"
    PI = "pi"
    UNRESOLVED = "unresolved"

    @property
    def radians(self) -> float:
        if self is ThetaAtPmin.UNRESOLVED:
            raise ParameterError("unresolved phase has no value")
        return 0.0 if self is ThetaAtPmin.ZERO else math.pi


class SourcePass(str, Enum):
    RIGHT_TO_LEFT = "right_to_left"
    LEFT_TO_RIGHT = "left_to_right"
    TRANSFORM = "transform"


class UnwrapKind(str, Enum):
    COSINE = "cosine"
    SINE = "sine"


class Constraint(str, Enum):
    HALF_PI = "half_pi"
    NONE = "none"


@dataclass(frozen=True)
class UnwrapSpec:
    kind: UnwrapKind = UnwrapKind.COSINE
    constraint: Constraint = Constraint.HALF_PI


@dataclass(frozen=True)
class StageCalibration:
    stage: int
    k: float
    dtheta: float
    p_min: float
    p_max: float
    theta_at_pmin: ThetaAtPmin
    source_pass: SourcePass
    constrained: bool = True

    def __post_init__(self):
        if self.k <= 0:
            raise ParameterError(f"stage {self.stage}: k must be positive, got {self.k}")

    @property
    def dtheta_deg(self) -> float:
        return math.degrees(self.dtheta)

    @property
    def theta_threshold(self) -> float:
        """phase the heater adds on the way to P_min"""
        return self.k * self.p_min


@dataclass(frozen=True)
class Extrema:
    p_min: float
    p_max: float
    c: float
    c2: float
    flank_slope: float | None = None


@dataclass(frozen=True)
class LineFit:
    k: float
    intercept: float
    rms: float
    n_points: int


@dataclass(frozen=True)
class PassRecord:
    """one outer/inner pair of a pass"""

    label: str
    direction: Direction
    source: SourcePass
    outer: int
    inner: int
    p_min: float
    p_max: float
    offset: float
    c: float
    c2: float
    u_p_max: float
    pinned_spread: float
    k_inner: float
    intercept: float
    rms: float
    trace: PairwiseTrace | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "direction": self.direction.value,
            "source": self.source.value,
            "outer": self.outer,
            "inner": self.inner,
            "p_min_mW": self.p_min,
            "p_max_mW": self.p_max,
            "offset_rad": self.offset,
            "c": self.c,
            "c2": self.c2,
            "u_p_max": self.u_p_max,
            "pinned_spread": self.pinned_spread,
            "k_inner": self.k_inner,
            "intercept_rad": self.intercept,
            "rms_rad": self.rms,
        }


@dataclass(frozen=True)
class CalibrationResult:
    stages: tuple[StageCalibration, ...]
    passes: tuple[PassRecord, ...] = ()
    mode: str = "constrained"

    def __iter__(self) -> Iterator[StageCalibration]:
        return iter(self.stages)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> StageCalibration:
        return self.stages[i]

    def stage(self, j: int) -> StageCalibration:
        for s in self.stages:
            if s.stage == j:
                return s
        raise KeyError(j)

    @property
    def ks(self) -> np.ndarray:
        return np.array([s.k for s in self.stages])

    @property
    def dthetas(self) -> np.ndarray:
        return np.array([s.dtheta for s in self.stages])

    def to_frame(self, interior_only: bool = False) -> pd.DataFrame:
        rows = [
            {
                "stage": s.stage,
                "P_min_mW": s.p_min,
                "k_rad_per_mW": s.k,
                "dtheta_rad": s.dtheta,
                "dtheta_deg": s.dtheta_deg,
                "theta_at_pmin": s.theta_at_pmin.value,
                "source_pass": s.source_pass.value,
            }
            for s in self.stages
            if not (interior_only and s.constrained)
        ]
        return pd.DataFrame(
            rows,
            columns=[
                "stage",
                "P_min_mW",
                "k_rad_per_mW",
                "dtheta_rad",
                "dtheta_deg",
                "theta_at_pmin",
                "source_pass",
            ],
        )


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """returns contiguous True runs as (start, stop), stop exclusive"""
    edges = np.diff(np.asarray(mask, dtype=np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def _trace_arrays(trace) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if isinstance(trace, PairwiseTrace):
        return trace.outer_power, trace.u_p, trace.mean_intensity
    arr = np.asarray(trace, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ParameterError("trace must be (P, U_P) or (P, U_P, mean) rows")
    mean = arr[:, 2] if arr.shape[1] == 3 else None
    return arr[:, 0], arr[:, 1], mean


def _flank_line(p: np.ndarray, y: np.ndarray, idx: list[int]) -> tuple[float, float] | None:
    if len(idx) < 3:
        return None
    slope, intercept = np.polyfit(p[idx], y[idx], 1)
    return float(slope), float(intercept)


def _refine_dip(
    p: np.ndarray, un: np.ndarray, i0: int, window: tuple[float, float]
) -> tuple[float, float | None]:
    """
    locates the zero of U_P ~ |sin(k (P - P0))| from its flanks.

    arcsin of the normalised trace is linear in P on both sides of the dip, so
    the two flank lines meet at P0.
    """
    lo, hi = window
    y = np.arcsin(np.clip(un, 0.0, 1.0))
    left, right = [], []
    i = i0 - 1
    while i >= 0 and y[i] <= hi:
        if y[i] >= lo:
            left.append(i)
        i -= 1
    i = i0 + 1
    while i < len(y) and y[i] <= hi:
        if y[i] >= lo:
            right.append(i)
        i += 1

    fl = _flank_line(p, y, left)
    fr = _flank_line(p, y, right)
    if fl and fr and fl[0] < 0 < fr[0]:
        p0 = (fr[1] - fl[1]) / (fl[0] - fr[0])
        slope = 0.5 * (fr[0] - fl[0])
    elif fr and fr[0] > 0:
        p0, slope = -fr[1] / fr[0], fr[0]
    elif fl and fl[0] < 0:
        p0, slope = -fl[1] / fl[0], -fl[0]
    else:
        return float(p[i0]), None

    # a fit that lands far from the coarse dip is not trusted
    span = p[min(i0 + 1, len(p) - 1)] - p[max(i0 - 1, 0)]
    if abs(p0 - p[i0]) > max(span, 0.5 / slope):
        return float(p[i0]), slope
    return float(p0), float(slope)


def find_extrema(
    trace, eps: float = 0.02, flank_window: tuple[float, float] = (0.15, 1.2)
) -> Extrema:
    """
    finds the first qualifying minimum and first maximum of a U_P trace.

    A dip qualifies once U_P drops below eps * max(U_P). A dip already in
    progress at the first sample is skipped when a later one exists, so the
    reported P_min always sits on a resolved dip.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    p, u, mean = _trace_arrays(trace)
    top = float(np.max(u)) if len(u) else 0.0
    if top <= 0.0:
        raise ScopeError("U_P is flat: the pair shows no interference")
    un = u / top

    dips = _runs(un < eps)
    if not dips:
        raise ScopeError(
            f"no U_P minimum below {eps:.3g} of its maximum; outer scope too short "
            "or the chain is too imbalanced"
        )
    if len(dips) > 1 and dips[0][0] == 0:
        dips = dips[1:]
    start, stop = dips[0]
    i0 = start + int(np.argmin(un[start:stop]))
    p_min, slope = _refine_dip(p, un, i0, flank_window)
    p_min = max(p_min, 0.0)

    plateaus = [r for r in _runs(un > 1.0 - eps) if r[0] > 0 and r[1] < len(un)]
    if plateaus:
        s, e = plateaus[0]
        p_max = 0.5 * float(p[s] + p[e - 1])
    else:
        p_max = float(p[int(np.argmax(un))])

    if mean is not None:
        c = float(np.clip(np.interp(p_min, p, mean), 0.0, 1.0))
    else:
        c = float("nan")
    c2 = 2.0 * math.sqrt(c * (1.0 - c)) if not math.isnan(c) else float("nan")
    logger.debug("extrema: P_min=%.4f P_max=%.4f c=%.4f c2=%.4f", p_min, p_max, c, c2)
    return Extrema(p_min, p_max, c, c2, slope)


def c2_from_c(c: float) -> float:
    """
    Examples
    --------
    >>> round(c2_from_c(0.9045), 4)
    0.5878
    """
    if not 0.0 <= c <= 1.0:
        raise ParameterError(f"c must lie in [0, 1], got {c}")
    return 2.0 * math.sqrt(c * (1.0 - c))


def arc_argument(intensities: Sequence[float], kind: UnwrapKind) -> np.ndarray:
    """normalise to the observed range and map to the cos/sin argument in [-1, 1]"""
    i = np.asarray(intensities, dtype=np.float64)
    if i.size == 0:
        raise ParameterError("empty intensity sequence")
    if np.any(i < -1e-9) or np.any(i > 1.0 + 1e-9):
        raise ParameterError("intensities must lie in [0, 1]")
    lo, hi = float(i.min()), float(i.max())
    if hi - lo <= 0.0:
        raise UnwrapError("intensity trace is flat", 0)
    n = (i - lo) / (hi - lo)
    return 1.0 - 2.0 * n if kind is UnwrapKind.COSINE else 2.0 * n - 1.0


def _turning_points(x: np.ndarray, threshold: float) -> list[tuple[int, bool]]:
    runs = [(s, e, True) for s, e in _runs(x > threshold)]
    runs += [(s, e, False) for s, e in _runs(x < -threshold)]
    runs.sort()

    merged: list[tuple[int, int, bool]] = []
    for s, e, top in runs:
        # same side twice in a row is noise around the threshold
        if merged and merged[-1][2] == top:
            merged[-1] = (merged[-1][0], e, top)
        else:
            merged.append((s, e, top))

    turns = []
    for s, e, top in merged:
        seg = x[s:e]
        idx = s + int(np.argmax(seg) if top else np.argmin(seg))
        if idx == len(x) - 1 and len(x) > 1:
            continue
        turns.append((idx, top))
    return turns


def _check_continuity(
    phase: np.ndarray, p: np.ndarray, x: np.ndarray, turns: Sequence[tuple[int, bool]]
) -> None:
    dphi = np.diff(phase)
    dp = np.diff(p)
    slope = float(np.median(dphi / dp))
    if slope <= 0:
        raise UnwrapError("unwrapped phase does not increase with power", 0)
    expected = slope * dp

    # arccos is ill-conditioned at the arc ends; steps touching them are not judged
    near_turn = np.abs(x) > ARC_ENDPOINT
    for idx, _ in turns:
        near_turn[max(idx - 1, 0) : idx + 2] = True
    judged = ~(near_turn[:-1] | near_turn[1:])

    jumps = np.abs(dphi - expected) > UNWRAP_JUMP_FACTOR * expected
    bad = np.flatnonzero(jumps & judged)
    if bad.size:
        i = int(bad[0]) + 1
        raise UnwrapError(
            f"phase jumps by {dphi[i - 1]:.3f} rad at sample {i} (expected {expected[i - 1]:.3f})",
            i,
        )


def unwrap_phase(
    intensities: Sequence[float],
    powers: Sequence[float],
    spec: UnwrapSpec = UnwrapSpec(),
    threshold: float = 0.9,
) -> np.ndarray:
    """
    Continuous phase from an I4 scan that follows (1 -/+ cos)/2 or (1 + sin)/2.

    Branches are switched at detected turning points: a top of the cosine
    argument is a multiple of 2*pi, a bottom an odd multiple of pi. The first
    turning point anchors the branch count, so the result is the true phase
    modulo 2*pi, increasing with power.
    """
    p = np.asarray(powers, dtype=np.float64)
    if len(p) != len(intensities):
        raise ParameterError("intensities and powers differ in length")
    if len(p) < 2 or np.any(np.diff(p) <= 0):
        raise ParameterError("powers must be strictly increasing")

    x = arc_argument(intensities, spec.kind)
    g = np.arccos(np.clip(x, -1.0, 1.0))
    turns = _turning_points(x, threshold)
    if not turns:
        raise UnwrapError("no turning point found: scan covers too little phase", 0)

    phase = np.empty_like(g)
    first_idx, first_top = turns[0]
    anchor = 0.0 if first_top else math.pi
    phase[:first_idx] = -g[:first_idx] if first_top else g[:first_idx]
    for n, (idx, top) in enumerate(turns):
        if n + 1 < len(turns) and turns[n + 1][1] == top:
            raise UnwrapError("two turning points of the same kind in a row", turns[n + 1][0])
        tp = anchor + n * math.pi
        end = turns[n + 1][0] if n + 1 < len(turns) else len(g)
        seg = g[idx:end]
        phase[idx:end] = tp + seg if top else tp + math.pi - seg

    _check_continuity(phase, p, x, turns)
    if spec.kind is UnwrapKind.SINE:
        phase = phase + HALF_PI
    return phase


def fit_line(
    powers: Sequence[float],
    theta: Sequence[float],
    arc_arg: Sequence[float] | None = None,
    min_points: int = 10,
) -> LineFit:
    """least-squares theta = k P + b, dropping samples at the arc-function endpoints"""
    p = np.asarray(powers, dtype=np.float64)
    t = np.asarray(theta, dtype=np.float64)
    if p.shape != t.shape:
        raise ParameterError("powers and phases differ in length")
    keep = np.ones(p.shape, dtype=bool)
    if arc_arg is not None:
        keep = np.abs(np.asarray(arc_arg, dtype=np.float64)) <= ARC_ENDPOINT
    n = int(keep.sum())
    if n < min_points:
        raise FitError(f"only {n} usable points for a line fit (need {min_points})")
    res = linregress(p[keep], t[keep])
    if not res.slope > 0:
        raise FitError(f"fitted slope {res.slope:.3g} rad/mW is not positive")
    resid = t[keep] - (res.intercept + res.slope * p[keep])
    return LineFit(float(res.slope), float(res.intercept), float(np.sqrt(np.mean(resid**2))), n)


def resolve_dtheta(
    k: float,
    p_min: float,
    constraint: Constraint = Constraint.HALF_PI,
    hint: ThetaAtPmin | None = None,
    offset: float = 0.0,
) -> tuple[float, ThetaAtPmin]:
    """
    Initial phase from the power of a dip.

    At `p_min` the relative phase theta + offset is 0 or pi. Under HALF_PI the
    branch giving |dtheta| < pi/2 wins; without a constraint the discriminator
    `hint` names the branch.

    Examples
    --------
    >>> d, at = resolve_dtheta(0.1459, 1.4921)
    >>> round(d, 4), at.value
    (-0.2177, 'zero')
    """
    if k <= 0:
        raise ParameterError(f"k must be positive, got {k}")
    phase = k * p_min
    if constraint is Constraint.NONE:
        if hint is None or hint is ThetaAtPmin.UNRESOLVED:
            raise ParameterError("an unconstrained stage needs a discriminator result")
        d = math.remainder(hint.radians - offset - phase, TWO_PI)
        if d == -math.pi:
            d = math.pi
        return d, hint

    m_lo = math.floor((phase + offset) / math.pi) - 1
    for m in range(m_lo, m_lo + 4):
        d = m * math.pi - offset - phase
        if abs(d) < HALF_PI:
            return d, ThetaAtPmin.ZERO if m % 2 == 0 else ThetaAtPmin.PI
    raise ConstraintViolationError(
        f"no branch puts dtheta inside (-pi/2, pi/2) for k={k:.4f}, P_min={p_min:.4f}"
    )


def _run_pass(
    device: SimulatedDevice,
    pairs: Sequence[tuple[int, int]],
    direction: Direction,
    source: SourcePass,
    label: str,
    config: CalibrationConfig,
    kind: UnwrapKind = UnwrapKind.COSINE,
    held: dict[int, float] | None = None,
    offsets: dict[int, float] | None = None,
) -> list[PassRecord]:
    """
    walks the pairs in order, after each pair the outer stage is pinned at its
    dip, which turns it into a cross or bar element for the next pair.
    """
    fixed = {j: 0.0 for j in range(1, device.n_stages + 1)}
    fixed.update(held or {})
    offsets = offsets or {}
    logger.info("%s pass, %s light: pairs %s", label, direction.value, list(pairs))

    records = []
    for outer, inner in pairs:
        trace = device.pairwise(
            outer,
            inner,
            fixed,
            direction,
            k_prior=config.k_prior,
            outer_margin=config.outer_margin,
            progress=config.progress,
        )
        ext = find_extrema(trace, config.eps, (config.flank_low, config.flank_high))
        p_pin = device.quantize(outer, ext.p_min)

        pinned = device.scan(inner, {**fixed, outer: p_pin}, direction)
        c = float(np.clip(np.mean(pinned.intensity), 0.0, 1.0))

        probe = device.scan(inner, {**fixed, outer: ext.p_max}, direction)
        theta = unwrap_phase(
            probe.intensity, probe.applied_power, UnwrapSpec(kind), config.turn_threshold
        )
        fit = fit_line(probe.applied_power, theta, arc_argument(probe.intensity, kind))

        rec = PassRecord(
            label=label,
            direction=direction,
            source=source,
            outer=outer,
            inner=inner,
            p_min=ext.p_min,
            p_max=ext.p_max,
            offset=offsets.get(outer, 0.0),
            c=c,
            c2=c2_from_c(c),
            u_p_max=float(np.max(trace.u_p)),
            pinned_spread=pinned.peak_to_peak,
            k_inner=fit.k,
            intercept=fit.intercept,
            rms=fit.rms,
            trace=trace,
        )
        records.append(rec)
        fixed[outer] = p_pin
        logger.info(
            "  pair %d/%d: P_min(%d) = %.4f mW, k(%d) = %.5f rad/mW, c2 = %.4f",
            outer, inner, outer, rec.p_min, inner, rec.k_inner, rec.c2,
        )
    return records


def _even_records(device: SimulatedDevice, config: CalibrationConfig) -> list[PassRecord]:
    n = device.n_stages
    kind = UnwrapKind.SINE if n == 2 else UnwrapKind.COSINE
    forward = _run_pass(
        device,
        [(j, j - 1) for j in range(n, 1, -2)],
        Direction.FORWARD,
        SourcePass.RIGHT_TO_LEFT,
        "right-to-left",
        config,
        kind,
    )
    reversed_ = _run_pass(
        device,
        [(j, j + 1) for j in range(1, n, 2)],
        Direction.REVERSED,
        SourcePass.LEFT_TO_RIGHT,
        "left-to-right",
        config,
        kind,
    )
    return forward + reversed_


def _odd_records(device: SimulatedDevice, config: CalibrationConfig) -> list[PassRecord]:
    n = device.n_stages
    forward = _run_pass(
        device,
        [(j, j - 1) for j in range(n, 2, -2)],
        Direction.FORWARD,
        SourcePass.RIGHT_TO_LEFT,
        "right-to-left",
        config,
    )
    reversed_ = _run_pass(
        device,
        [(j, j + 1) for j in range(1, n - 1, 2)],
        Direction.REVERSED,
        SourcePass.LEFT_TO_RIGHT,
        "left-to-right",
        config,
    )
    # a terminal stage at theta = pi/2 acts as an MMI with quadrature delays
    last_max = next(r.p_max for r in forward if r.outer == n)
    first_max = next(r.p_max for r in reversed_ if r.outer == 1)
    transform_rl = _run_pass(
        device,
        [(j, j - 1) for j in range(n - 1, 1, -2)],
        Direction.FORWARD,
        SourcePass.TRANSFORM,
        "transform right-to-left",
        config,
        held={n: last_max},
        offsets={n - 1: HALF_PI},
    )
    transform_lr = _run_pass(
        device,
        [(j, j + 1) for j in range(2, n, 2)],
        Direction.REVERSED,
        SourcePass.TRANSFORM,
        "transform left-to-right",
        config,
        held={1: first_max},
        offsets={2: HALF_PI},
    )
    return forward + reversed_ + transform_rl + transform_lr


@dataclass(frozen=True)
class _Evidence:
    stage: int
    k: float
    record: PassRecord


def _merge_k(stage: int, values: list[float], tol: float) -> float:
    if not values:
        raise ParameterError(f"stage {stage}: no pass measured its slope")
    spread = max(values) - min(values)
    if spread > tol:
        raise PassInconsistencyError(
            f"stage {stage}: slopes {', '.join(f'{v:.5f}' for v in values)} differ by "
            f"{spread:.2e} rad/mW (limit {tol:.1e})"
        )
    if spread > 0.4 * tol:
        logger.warning("stage %d: slopes from two passes differ by %.2e rad/mW", stage, spread)
    return float(np.mean(values))


def _collect(records: list[PassRecord], n: int, tol: float) -> list[_Evidence]:
    slopes: dict[int, list[float]] = {j: [] for j in range(1, n + 1)}
    dips: dict[int, list[PassRecord]] = {j: [] for j in range(1, n + 1)}
    for r in records:
        slopes[r.inner].append(r.k_inner)
        dips[r.outer].append(r)
    evidence = []
    for j in range(1, n + 1):
        if not dips[j]:
            raise ParameterError(f"stage {j}: no pass located its dip")
        # a dip measured without the injected pi/2 is preferred
        rec = min(dips[j], key=lambda r: r.offset != 0.0)
        evidence.append(_Evidence(j, _merge_k(j, slopes[j], tol), rec))
    return evidence


def _label_at(dtheta: float, k: float, p: float) -> ThetaAtPmin:
    return ThetaAtPmin.ZERO if round((dtheta + k * p) / math.pi) % 2 == 0 else ThetaAtPmin.PI


def _stage(
    ev: _Evidence, dtheta: float, p_min: float, label: ThetaAtPmin, constrained: bool
) -> StageCalibration:
    p_max = ((HALF_PI - dtheta) % TWO_PI) / ev.k
    return StageCalibration(
        ev.stage, ev.k, dtheta, p_min, p_max, label, ev.record.source, constrained
    )


def _finish_constrained(ev: _Evidence) -> StageCalibration:
    rec = ev.record
    dtheta, label = resolve_dtheta(ev.k, rec.p_min, Constraint.HALF_PI, offset=rec.offset)
    p_min = rec.p_min
    if rec.offset:
        p_min = ((-dtheta) % math.pi) / ev.k
        label = _label_at(dtheta, ev.k, p_min)
    logger.info(
        "stage %d: k = %.5f rad/mW, dtheta = %.4f rad (%s at P_min = %.4f mW)",
        ev.stage, ev.k, dtheta, label.value, p_min,
    )
    return _stage(ev, dtheta, p_min, label, constrained=True)


def _standard_pmin(ev: _Evidence) -> float:
    """power where theta itself is 0 or pi, without knowing dtheta"""
    rec = ev.record
    if not rec.offset:
        return rec.p_min
    shift = rec.offset / ev.k
    return rec.p_min - shift if rec.p_min >= shift else rec.p_min + shift


def calibrate_1cps(
    device: SimulatedDevice, config: CalibrationConfig | None = None
) -> StageCalibration:
    config = config or CalibrationConfig()
    if device.n_stages != 1:
        raise ParameterError(f"calibrate_1cps needs one stage, got {device.n_stages}")
    trace = device.scan(1, {}, Direction.FORWARD)
    theta = unwrap_phase(
        trace.intensity, trace.applied_power, UnwrapSpec(UnwrapKind.COSINE), config.turn_threshold
    )
    fit = fit_line(
        trace.applied_power, theta, arc_argument(trace.intensity, UnwrapKind.COSINE)
    )
    phase = (-fit.intercept) % math.pi
    if math.pi - phase < config.snap_tol:
        phase = 0.0
    p_min = phase / fit.k
    dtheta, label = resolve_dtheta(fit.k, p_min, Constraint.HALF_PI)
    logger.info(
        "stage 1: k = %.5f rad/mW, dtheta = %.4f rad, fit rms %.2e rad", fit.k, dtheta, fit.rms
    )
    ev = _Evidence(
        1,
        fit.k,
        PassRecord(
            "single", Direction.FORWARD, SourcePass.RIGHT_TO_LEFT, 1, 1, p_min, p_min, 0.0,
            float("nan"), float("nan"), trace.peak_to_peak, 0.0, fit.k, fit.intercept, fit.rms,
        ),
    )
    return _stage(ev, dtheta, p_min, label, constrained=True)


def calibrate_even(
    device: SimulatedDevice, config: CalibrationConfig | None = None
) -> CalibrationResult:
    config = config or CalibrationConfig()
    n = device.n_stages
    if n < 2 or n % 2:
        raise ParameterError(f"calibrate_even needs an even stage count, got {n}")
    records = _even_records(device, config)
    evidence = _collect(records, n, config.k_tolerance)
    return CalibrationResult(tuple(_finish_constrained(ev) for ev in evidence), tuple(records))


def calibrate_2cps(
    device: SimulatedDevice, config: CalibrationConfig | None = None
) -> CalibrationResult:
    if device.n_stages != 2:
        raise ParameterError(f"calibrate_2cps needs two stages, got {device.n_stages}")
    return calibrate_even(device, config)


def calibrate_odd(
    device: SimulatedDevice, config: CalibrationConfig | None = None
) -> CalibrationResult:
    config = config or CalibrationConfig()
    n = device.n_stages
    if n < 3 or n % 2 == 0:
        raise ParameterError(f"calibrate_odd needs an odd stage count >= 3, got {n}")
    records = _odd_records(device, config)
    evidence = _collect(records, n, config.k_tolerance)
    return CalibrationResult(tuple(_finish_constrained(ev) for ev in evidence), tuple(records))


# probe readings expected for each phase at the pinned dip, by chain parity
EVEN_CHAIN_LEVELS = {ThetaAtPmin.ZERO: (0.5,), ThetaAtPmin.PI: (0.7795, 0.2205)}
ODD_CHAIN_EVEN_STAGE_LEVELS = {ThetaAtPmin.ZERO: (0.0, 1.0), ThetaAtPmin.PI: (0.9045, 0.0955)}
ODD_CHAIN_ODD_STAGE_LEVELS = {ThetaAtPmin.ZERO: (0.9755, 0.0245), ThetaAtPmin.PI: (0.8847, 0.1153)}


def _shifted_power(device: SimulatedDevice, cal: StageCalibration, dphi: float) -> float:
    p = cal.p_min + dphi / cal.k
    if p > device.max_power(cal.stage):
        p -= TWO_PI / cal.k
    if p < 0.0:
        raise ScopeError(f"stage {cal.stage}: a {dphi:.3f} rad probe does not fit the scan range")
    return p


def _classify(
    stage: int, intensity: float, levels: dict[ThetaAtPmin, tuple[float, ...]], band: float
) -> ThetaAtPmin:
    dist, label = min(
        ((abs(intensity - v), lab) for lab, values in levels.items() for v in values),
        key=lambda t: t[0],
    )
    if dist > band:
        raise DiscriminationError(
            f"stage {stage}: probe reading {intensity:.4f} is {dist:.3f} away from every "
            "expected level"
        )
    logger.debug("stage %d: probe reading %.4f -> %s", stage, intensity, label.value)
    return label


def _pinned(cals: Sequence[StageCalibration], n: int) -> dict[int, StageCalibration]:
    by_stage = {c.stage: c for c in cals}
    missing = [j for j in range(1, n + 1) if j not in by_stage]
    if missing:
        raise ParameterError(f"no calibration for stage(s) {missing}")
    return by_stage


def probe_even_nc(
    device: SimulatedDevice,
    cals: Sequence[StageCalibration],
    stage: int,
    config: CalibrationConfig | None = None,
) -> float:
    """
    probe reading for an interior stage of an even chain with every stage at
    its dip. Even stages are read forward through the last stage, odd stages
    backward through the first.
    """
    config = config or CalibrationConfig()
    n = device.n_stages
    if n % 2 or not 2 <= stage <= n - 1:
        raise ParameterError(f"stage {stage} is not an interior stage of an even chain")
    by_stage = _pinned(cals, n)
    powers = {j: c.p_min for j, c in by_stage.items()}
    shift = config.probe_fraction * math.pi
    if stage % 2 == 0:
        probes, direction = (stage - 1, stage + 1, n), Direction.FORWARD
    else:
        probes, direction = (stage - 1, stage + 1, 1), Direction.REVERSED
    for j in probes:
        powers[j] = _shifted_power(device, by_stage[j], shift)
    return device.measure(powers, direction)


def discriminate_even_nc(
    device: SimulatedDevice,
    cals: Sequence[StageCalibration],
    stage: int,
    config: CalibrationConfig | None = None,
) -> ThetaAtPmin:
    config = config or CalibrationConfig()
    reading = probe_even_nc(device, cals, stage, config)
    return _classify(stage, reading, EVEN_CHAIN_LEVELS, config.band)


def probe_odd_nc(
    device: SimulatedDevice,
    cals: Sequence[StageCalibration],
    stage: int,
    config: CalibrationConfig | None = None,
) -> float:
    config = config or CalibrationConfig()
    n = device.n_stages
    if n % 2 == 0 or not 2 <= stage <= n - 1:
        raise ParameterError(f"stage {stage} is not an interior stage of an odd chain")
    by_stage = _pinned(cals, n)
    powers = {j: c.p_min for j, c in by_stage.items()}
    shift = config.probe_fraction * math.pi
    if stage % 2 == 0:
        probes = (stage - 1, stage + 1)
    else:
        powers[1] = _shifted_power(device, by_stage[1], HALF_PI)
        probes = (stage - 1, stage + 1, n)
    for j in probes:
        powers[j] = _shifted_power(device, by_stage[j], shift)
    return device.measure(powers, Direction.FORWARD)


def discriminate_odd_nc(
    device: SimulatedDevice,
    cals: Sequence[StageCalibration],
    stage: int,
    config: CalibrationConfig | None = None,
) -> ThetaAtPmin:
    config = config or CalibrationConfig()
    reading = probe_odd_nc(device, cals, stage, config)
    levels = ODD_CHAIN_EVEN_STAGE_LEVELS if stage % 2 == 0 else ODD_CHAIN_ODD_STAGE_LEVELS
    return _classify(stage, reading, levels, config.band)


def calibrate_nonconstraint(
    device: SimulatedDevice, config: CalibrationConfig | None = None
) -> CalibrationResult:
    """
    Slopes and dips as in the constrained run; the branch of every interior
    stage comes from a probe reading instead of |dtheta| < pi/2. The two
    terminal stages keep the constrained result and stay flagged as such.
    """
    config = config or CalibrationConfig()
    n = device.n_stages
    if n < 3:
        raise ParameterError(f"constraint-free calibration needs at least 3 stages, got {n}")
    records = _even_records(device, config) if n % 2 == 0 else _odd_records(device, config)
    evidence = _collect(records, n, config.k_tolerance)

    provisional = [
        StageCalibration(
            ev.stage, ev.k, 0.0, _standard_pmin(ev), _standard_pmin(ev),
            ThetaAtPmin.UNRESOLVED, ev.record.source, constrained=False,
        )
        for ev in evidence
    ]
    discriminate = discriminate_even_nc if n % 2 == 0 else discriminate_odd_nc

    stages = []
    for ev, prov in zip(evidence, provisional):
        if ev.stage in (1, n):
            stages.append(_finish_constrained(ev))
            continue
        label = discriminate(device, provisional, ev.stage, config)
        dtheta, _ = resolve_dtheta(ev.k, prov.p_min, Constraint.NONE, hint=label)
        logger.info(
            "stage %d: k = %.5f rad/mW, dtheta = %.4f rad (probe says %s)",
            ev.stage, ev.k, dtheta, label.value,
        )
        stages.append(_stage(ev, dtheta, prov.p_min, label, constrained=False))
    return CalibrationResult(tuple(stages), tuple(records), mode="nonconstraint")


def calibrate(
    device: SimulatedDevice, config: CalibrationConfig | None = None, mode: str = "constrained"
) -> CalibrationResult:
    config = config or CalibrationConfig()
    if mode == "nonconstraint":
        return calibrate_nonconstraint(device, config)
    if mode != "constrained":
        raise ParameterError(f"unknown calibration mode {mode!r}")
    n = device.n_stages
    if n == 1:
        return CalibrationResult((calibrate_1cps(device, config),))
    if n % 2 == 0:
        return calibrate_even(device, config)
    return calibrate_odd(device, config)


def temperature_study(
    chain: ChainModel,
    temps: Sequence[float],
    instrument: InstrumentModel | None = None,
    config: CalibrationConfig | None = None,
) -> pd.DataFrame:
    """recalibrate the chain at each ambient temperature, one row per (temperature, stage)"""
    rows = []
    for temp in temps:
        device = SimulatedDevice(chain.with_ambient(temp), instrument)
        result = calibrate(device, config)
        for s in result:
            rows.append(
                {
                    "temp_c": float(temp),
                    "stage": s.stage,
                    "k_rad_per_mW": s.k,
                    "dtheta_rad": s.dtheta,
                    "dtheta_deg": s.dtheta_deg,
                }
            )
        logger.info("%.1f C: dtheta_1 = %.4f rad", temp, result[0].dtheta)
    return pd.DataFrame(rows)


def drift_from_study(study: pd.DataFrame, stage: int = 1) -> float:
    rows = study[study["stage"] == stage]
    return fit_drift_coefficient(rows["temp_c"], rows["dtheta_rad"])
