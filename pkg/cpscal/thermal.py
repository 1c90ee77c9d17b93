"""
Steady-state heat conduction in the TOPS cross-section.

Cell-centred finite volumes on a graded rectangular grid. The heater is
treated as infinitely long, so the solve is per unit length along the
waveguide. Coordinates are in um with y = 0 at the top of the BOX and x = 0
on the heater axis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import factorized
from scipy.stats import linregress
from tqdm import tqdm

from cpscal.errors import ParameterError, ThermalSolverError

logger = logging.getLogger(__name__)

# config
UM = 1e-6
RESIDUAL_TOL = 1e-8

# validity range of the silicon thermo-optic polynomial, K
TO_RANGE = (300.0, 600.0)
TO_COEFFS = (9.45e-5, 3.47e-7, -1.49e-10)


@dataclass(frozen=True)
class Material:
    name: str
    rho: float
    cp: float
    k_hc: float

    def __post_init__(self):
        if min(self.rho, self.cp, self.k_hc) <= 0:
            raise ParameterError(f"{self.name}: material constants must be positive")


SILICON = Material("Si", 2330.0, 711.0, 148.0)
SILICA = Material("SiO2", 2203.0, 709.0, 1.38)
TITANIUM_NITRIDE = Material("TiN", 5430.0, 604.45, 67.7)
AIR = Material("air", 1.17, 1006.43, 0.026)

MATERIALS = {m.name: m for m in (SILICON, SILICA, TITANIUM_NITRIDE, AIR)}


@dataclass(frozen=True)
class Region:
    name: str
    material: Material
    x: tuple[float, float]
    y: tuple[float, float]

    def contains(self, xc: np.ndarray, yc: np.ndarray) -> np.ndarray:
        return (
            (xc > self.x[0]) & (xc < self.x[1]) & (yc > self.y[0]) & (yc < self.y[1])
        )

    @property
    def area(self) -> float:
        return (self.x[1] - self.x[0]) * (self.y[1] - self.y[0])


@dataclass(frozen=True)
class CrossSection:
    """Geometry, materials, boundary data and grid grading of one TOPS."""

    half_width: float = 25.0
    substrate_depth: float = 10.0
    h_box: float = 2.0
    h_clad: float = 2.0
    w_wg: float = 0.45
    h_wg: float = 0.22
    w_mh: float = 2.5
    h_mh: float = 0.1
    h_int: float = 0.85
    heater_length: float = 390.0
    t_bc: float = 300.0
    h_air: float = 10.0
    h_fine: float = 0.05
    h_max: float = 1.0
    fine_margin: float = 3.0
    core: Material = SILICON
    oxide: Material = SILICA
    heater_material: Material = TITANIUM_NITRIDE

    def __post_init__(self):
        sizes = (
            self.half_width, self.substrate_depth, self.h_box, self.h_clad, self.w_wg,
            self.h_wg, self.w_mh, self.h_mh, self.h_int, self.heater_length,
            self.h_fine, self.h_max,
        )
        if min(sizes) <= 0:
            raise ParameterError("cross-section sizes and grid spacings must be positive")
        if self.h_wg + self.h_int + self.h_mh > self.h_clad:
            raise ParameterError("heater does not fit inside the cladding")
        if max(self.w_wg, self.w_mh) / 2.0 >= self.half_width:
            raise ParameterError("domain is narrower than the heater")
        if self.h_air < 0:
            raise ParameterError("h_air must be >= 0")

    @property
    def y_bottom(self) -> float:
        return -self.h_box - self.substrate_depth

    @property
    def waveguide(self) -> Region:
        return Region("waveguide", self.core, (-self.w_wg / 2, self.w_wg / 2), (0.0, self.h_wg))

    @property
    def heater(self) -> Region:
        y0 = self.h_wg + self.h_int
        return Region(
            "heater", self.heater_material, (-self.w_mh / 2, self.w_mh / 2), (y0, y0 + self.h_mh)
        )

    @property
    def regions(self) -> tuple[Region, ...]:
        """painted in order, later regions win"""
        w = self.half_width
        return (
            Region("substrate", self.core, (-w, w), (self.y_bottom, -self.h_box)),
            Region("box", self.oxide, (-w, w), (-self.h_box, 0.0)),
            Region("cladding", self.oxide, (-w, w), (0.0, self.h_clad)),
            self.waveguide,
            self.heater,
        )

    def widened(self, half_width: float) -> CrossSection:
        return replace(self, half_width=half_width)

    def x_edges(self) -> np.ndarray:
        fine = max(self.w_wg, self.w_mh) / 2.0 + self.fine_margin
        edge = min(fine, self.half_width)
        breaks = sorted({0.0, self.w_wg / 2, self.w_mh / 2, edge, self.half_width})
        half = _graded_axis(breaks, 0.0, fine, self.h_fine, self.h_max)
        return np.concatenate([-half[:0:-1], half])

    def y_edges(self) -> np.ndarray:
        top_wg = self.h_wg
        y_mh = self.h_wg + self.h_int
        breaks = sorted(
            {self.y_bottom, -self.h_box, 0.0, top_wg, y_mh, y_mh + self.h_mh, self.h_clad}
            | ({-self.fine_margin} if -self.fine_margin > self.y_bottom else set())
        )
        return _graded_axis(breaks, -self.fine_margin, self.h_clad, self.h_fine, self.h_max)


def _graded_axis(
    breaks: Sequence[float], fine_lo: float, fine_hi: float, h_fine: float, h_max: float
) -> np.ndarray:
    """edges with spacing h_fine inside [fine_lo, fine_hi], growing to h_max outside."""
    edges = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        pts = [a]
        while pts[-1] < b - 1e-12:
            x = pts[-1]
            d = max(fine_lo - x, x - fine_hi, 0.0)
            pts.append(x + min(h_max, h_fine + 0.25 * d))
        arr = np.asarray(pts)
        # stretch so the march ends exactly on the breakpoint
        arr = a + (arr - a) * (b - a) / (arr[-1] - a)
        edges.extend(arr[1:].tolist())
    return np.asarray(edges)


@dataclass(frozen=True)
class EnergyBalance:
    """heat flows per unit length, W/m"""

    injected: float
    through_bottom: float
    through_top: float

    @property
    def outgoing(self) -> float:
        return self.through_bottom + self.through_top

    @property
    def relative_error(self) -> float:
        if self.injected == 0.0:
            return 0.0
        return abs(self.outgoing - self.injected) / self.injected


@dataclass(frozen=True)
class TemperatureField:
    x: np.ndarray
    y: np.ndarray
    temperature: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    power: float
    cross_section: CrossSection = field(repr=False)
    energy: EnergyBalance | None = None

    @property
    def rise(self) -> np.ndarray:
        return self.temperature - self.cross_section.t_bc

    def mean_over(self, region: Region) -> float:
        xc, yc = np.meshgrid(self.x, self.y)
        mask = region.contains(xc, yc)
        if not mask.any():
            raise ParameterError(f"region {region.name} holds no grid cells")
        area = np.outer(self.dy, self.dx)
        return float(np.sum(self.temperature[mask] * area[mask]) / np.sum(area[mask]))

    def spread_over(self, region: Region) -> float:
        xc, yc = np.meshgrid(self.x, self.y)
        t = self.temperature[region.contains(xc, yc)]
        return float(t.max() - t.min())

    def at(self, x: float | np.ndarray, y: float | np.ndarray) -> np.ndarray:
        interp = RegularGridInterpolator(
            (self.y, self.x), self.temperature, bounds_error=False, fill_value=None
        )
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return interp(np.stack([y.ravel(), x.ravel()], axis=-1)).reshape(x.shape)

    def to_frame(self) -> pd.DataFrame:
        xc, yc = np.meshgrid(self.x, self.y)
        return pd.DataFrame(
            {"x_um": xc.ravel(), "y_um": yc.ravel(), "T_K": self.temperature.ravel()}
        )


class ThermalSolver:
    """
    assembles and factorises the conduction matrix once; each `solve` is then
    a single back-substitution.
    """

    def __init__(self, cs: CrossSection | None = None):
        self.cs = cs or CrossSection()
        self.x_edges = self.cs.x_edges()
        self.y_edges = self.cs.y_edges()
        self.x = 0.5 * (self.x_edges[1:] + self.x_edges[:-1])
        self.y = 0.5 * (self.y_edges[1:] + self.y_edges[:-1])
        self.dx = np.diff(self.x_edges)
        self.dy = np.diff(self.y_edges)
        self.k = self._conductivity()
        self._heater_mask = self.cs.heater.contains(*np.meshgrid(self.x, self.y))
        if not self._heater_mask.any():
            raise ParameterError("grid does not resolve the heater")
        self.matrix, self.g_bottom, self.g_top = self._assemble()
        self._solve = factorized(self.matrix.tocsc())
        logger.debug(
            "thermal grid %d x %d (%d unknowns), half-width %.1f um",
            len(self.x), len(self.y), self.matrix.shape[0], self.cs.half_width,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.y), len(self.x)

    def _conductivity(self) -> np.ndarray:
        xc, yc = np.meshgrid(self.x, self.y)
        k = np.zeros(xc.shape)
        for region in self.cs.regions:
            k[region.contains(xc, yc)] = region.material.k_hc
        if np.any(k == 0):
            raise ParameterError("some grid cells lie outside every region")
        return k

    def _assemble(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        ny, nx = self.shape
        dx = self.dx * UM
        dy = self.dy * UM
        k = self.k
        idx = np.arange(nx * ny).reshape(ny, nx)

        # harmonic face conductances, W/(m K) per unit length
        half_x = dx[None, :] / (2.0 * k)
        gx = dy[:, None] / (half_x[:, :-1] + half_x[:, 1:])
        half_y = dy[:, None] / (2.0 * k)
        gy = dx[None, :] / (half_y[:-1, :] + half_y[1:, :])
        g_bottom = dx / half_y[0, :]
        g_top = dx / (half_y[-1, :] + 1.0 / self.cs.h_air) if self.cs.h_air > 0 else np.zeros(nx)

        diag = np.zeros((ny, nx))
        diag[:, :-1] += gx
        diag[:, 1:] += gx
        diag[:-1, :] += gy
        diag[1:, :] += gy
        diag[0, :] += g_bottom
        diag[-1, :] += g_top

        rows = [idx.ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel(),
                idx[:-1, :].ravel(), idx[1:, :].ravel()]
        cols = [idx.ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel(),
                idx[1:, :].ravel(), idx[:-1, :].ravel()]
        vals = [diag.ravel(), -gx.ravel(), -gx.ravel(), -gy.ravel(), -gy.ravel()]
        a = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nx * ny, nx * ny),
        ).tocsr()
        return a, g_bottom, g_top

    def source(self, power: float) -> np.ndarray:
        """heater power per unit length spread over heater cells by area, W/m"""
        per_length = power * 1e-3 / (self.cs.heater_length * UM)
        area = np.outer(self.dy, self.dx)
        q = np.where(self._heater_mask, area, 0.0)
        return (q / q.sum() * per_length).ravel()

    def solve(self, power: float) -> TemperatureField:
        if power < 0:
            raise ParameterError(f"heating power must be >= 0, got {power}")
        s = self.source(power)
        if power == 0.0:
            rise = np.zeros_like(s)
        else:
            rise = self._solve(s)
            residual = float(np.linalg.norm(self.matrix @ rise - s) / np.linalg.norm(s))
            if not residual <= RESIDUAL_TOL:
                raise ThermalSolverError(
                    f"linear solve left a relative residual of {residual:.2e}", residual
                )
        rise = rise.reshape(self.shape)
        energy = EnergyBalance(
            injected=float(s.sum()),
            through_bottom=float(np.sum(self.g_bottom * rise[0, :])),
            through_top=float(np.sum(self.g_top * rise[-1, :])),
        )
        return TemperatureField(
            self.x, self.y, rise + self.cs.t_bc, self.dx, self.dy, power, self.cs, energy
        )


def solve_steady(cs: CrossSection | None = None, power: float = 20.0) -> TemperatureField:
    return ThermalSolver(cs).solve(power)


def waveguide_temp(field: TemperatureField, cs: CrossSection | None = None) -> float:
    """area-weighted mean temperature of the silicon core"""
    cs = cs or field.cross_section
    return field.mean_over(cs.waveguide)


def _check_to_range(t) -> None:
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < TO_RANGE[0]) or np.any(t_arr > TO_RANGE[1]):
        logger.warning(
            "thermo-optic coefficient extrapolated outside %.0f-%.0f K", *TO_RANGE
        )


def thermo_optic_coeff(t):
    """
    dn/dT of silicon in the C band.

    Examples
    --------
    >>> round(float(thermo_optic_coeff(300.0)) * 1e4, 3)
    1.852
    """
    t_arr = np.asarray(t, dtype=np.float64)
    _check_to_range(t_arr)
    a, b, c = TO_COEFFS
    return a + b * t_arr + c * t_arr**2


def index_change(t: float, t_ref: float = 300.0) -> float:
    """integral of dn/dT from t_ref to t"""
    _check_to_range([t_ref, t])
    a, b, c = TO_COEFFS

    def antiderivative(x: float) -> float:
        return a * x + b * x**2 / 2.0 + c * x**3 / 3.0

    return antiderivative(t) - antiderivative(t_ref)


def phase_from_temperature(
    t_wg: float, wg_length: float = 390.0, wavelength: float = 1.55, t_ref: float = 300.0
) -> float:
    return 2.0 * math.pi / wavelength * index_change(t_wg, t_ref) * wg_length


def phase_from_power(
    cs: CrossSection | None = None,
    power: float = 20.0,
    wg_length: float = 390.0,
    wavelength: float = 1.55,
) -> float:
    field = solve_steady(cs, power)
    return phase_from_temperature(
        waveguide_temp(field), wg_length, wavelength, field.cross_section.t_bc
    )


def sweep(
    cs: CrossSection | None = None,
    powers: Sequence[float] = tuple(range(0, 61, 10)),
    wg_length: float = 390.0,
    wavelength: float = 1.55,
    progress: bool = False,
) -> pd.DataFrame:
    solver = ThermalSolver(cs)
    rows = []
    for p in tqdm(powers, desc="thermal sweep", disable=not progress, leave=False):
        field = solver.solve(float(p))
        t_wg = waveguide_temp(field)
        rows.append(
            {
                "P_mW": float(p),
                "T_wg_K": t_wg,
                "theta_rad": phase_from_temperature(t_wg, wg_length, wavelength, solver.cs.t_bc),
            }
        )
    return pd.DataFrame(rows, columns=["P_mW", "T_wg_K", "theta_rad"])


@dataclass(frozen=True)
class PhaseSlope:
    slope: float
    intercept: float
    r_squared: float

    @property
    def pi_power(self) -> float:
        return math.pi / self.slope


def phase_slope(table: pd.DataFrame, column: str = "theta_rad") -> PhaseSlope:
    """straight-line fit of a sweep column against power"""
    if len(table) < 2:
        raise ParameterError("a slope needs at least two sweep points")
    res = linregress(table["P_mW"], table[column])
    return PhaseSlope(float(res.slope), float(res.intercept), float(res.rvalue**2))


def crosstalk_profile(
    cs: CrossSection | None,
    power: float,
    offsets: Sequence[float],
    clearance: float = 5.0,
) -> np.ndarray:
    """
    temperature rise at waveguide mid-height for lateral offsets from the
    heater axis. The domain is widened when an offset comes within
    `clearance` of the insulated side wall.
    """
    cs = cs or CrossSection()
    offsets = np.abs(np.asarray(offsets, dtype=np.float64))
    needed = float(offsets.max(initial=0.0)) + clearance
    if needed > cs.half_width:
        logger.info("widening thermal domain to +/-%.1f um for crosstalk", math.ceil(needed))
        cs = cs.widened(float(math.ceil(needed)))
    field = ThermalSolver(cs).solve(power)
    return field.at(offsets, np.full_like(offsets, cs.h_wg / 2.0)) - cs.t_bc


def crosstalk_at(cs: CrossSection | None, power: float, offset: float) -> float:
    return float(crosstalk_profile(cs, power, [offset])[0])


def crosstalk_table(
    cs: CrossSection | None, power: float, offsets: Sequence[float]
) -> pd.DataFrame:
    rise = crosstalk_profile(cs, power, offsets)
    offsets = np.asarray(offsets, dtype=np.float64)
    self_heating = rise[0] if offsets.size and offsets[0] == 0.0 else crosstalk_at(cs, power, 0.0)
    return pd.DataFrame(
        {
            "offset_um": offsets,
            "rise_K": rise,
            "fraction_of_self": rise / self_heating if self_heating > 0 else np.zeros_like(rise),
        }
    )
