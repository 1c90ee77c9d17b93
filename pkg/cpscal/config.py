"""
Scenario files and tuning knobs.

A scenario is a YAML (or JSON) document with `schema: 1`. Everything is
validated by pydantic; any failure surfaces as ConfigError naming the field.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from cpscal.device_sim import (
    DEFAULT_RESISTANCE_KOHM,
    REFERENCE_TEMP_C,
    ChainModel,
    InstrumentModel,
    TopsGroundTruth,
)
from cpscal.errors import ConfigError
from cpscal.jones_core import MmiParams
from cpscal.thermal import CrossSection


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CalibrationConfig(_Model):
    eps: float = Field(0.02, gt=0, lt=1)
    k_prior: float = Field(0.11, gt=0, description="lower bound on any stage slope, rad/mW")
    outer_margin: float = Field(1.25, ge=1.0)
    flank_low: float = Field(0.15, ge=0)
    flank_high: float = Field(1.2, le=1.5)
    turn_threshold: float = Field(0.9, gt=0, lt=1)
    k_tolerance: float = Field(5e-3, gt=0)
    band: float = Field(0.05, gt=0)
    probe_fraction: float = Field(0.4, gt=0, lt=1)
    snap_tol: float = Field(1e-3, ge=0)
    progress: bool = False

    @model_validator(mode="after")
    def _window(self):
        if self.flank_low >= self.flank_high:
            raise ValueError("flank_low must be below flank_high")
        return self


class StageSpec(_Model):
    k: float = Field(gt=0)
    dtheta: float
    resistance: float = Field(DEFAULT_RESISTANCE_KOHM, gt=0)
    dtheta_temp_coeff: float = 0.0


class MmiSpec(_Model):
    eta: float = Field(0.5, gt=0, lt=1)
    tau: float = Field(0.0, ge=0)
    kappa: float = Field(0.0, ge=0)

    def to_params(self) -> MmiParams:
        return MmiParams(self.eta, self.tau, self.kappa)


class ChainSpec(_Model):
    stages: list[StageSpec] = Field(min_length=1)
    mmi: MmiSpec | None = None
    mmis: list[MmiSpec] | None = None
    ambient_temp: float = REFERENCE_TEMP_C

    @model_validator(mode="after")
    def _couplers(self):
        if self.mmi is not None and self.mmis is not None:
            raise ValueError("give either mmi or mmis, not both")
        if self.mmis is not None and len(self.mmis) != len(self.stages) + 1:
            raise ValueError(
                f"mmis needs {len(self.stages) + 1} entries for {len(self.stages)} stages"
            )
        return self

    def to_model(self) -> ChainModel:
        stages = tuple(
            TopsGroundTruth(s.k, s.dtheta, s.resistance, s.dtheta_temp_coeff, label=i + 1)
            for i, s in enumerate(self.stages)
        )
        if self.mmis is not None:
            mmis = tuple(m.to_params() for m in self.mmis)
        else:
            mmis = ((self.mmi or MmiSpec()).to_params(),) * (len(stages) + 1)
        return ChainModel(stages, mmis, self.ambient_temp)


class InstrumentSpec(_Model):
    v_min: float = 0.0
    v_max: float = 10.0
    v_step: float = Field(0.01, gt=0)
    noise_sigma: float = Field(0.0, ge=0)
    high_resolution: bool = False

    def to_model(self, seed: int = 0) -> InstrumentModel:
        inst = InstrumentModel(self.v_min, self.v_max, self.v_step, self.noise_sigma, seed)
        return inst.high_resolution() if self.high_resolution else inst


class SimulateConfig(_Model):
    stage: int = Field(1, ge=1)
    outer: int | None = Field(None, ge=1)
    fixed: dict[int, float] = Field(default_factory=dict)
    direction: Literal["forward", "reversed"] = "forward"


class FidelityConfig(_Model):
    bins: int = Field(50, ge=1)
    hist_low: float = 0.99
    hist_high: float = 1.0
    thresholds: list[float] = Field(default_factory=lambda: [0.999, 0.9995, 0.9999])


class ThermalConfig(_Model):
    powers_mw: list[float] = Field(default_factory=lambda: [0, 10, 20, 30, 40, 50, 60])
    field_power_mw: float = Field(20.0, ge=0)
    crosstalk_power_mw: float = Field(60.0, ge=0)
    offsets_um: list[float] = Field(default_factory=lambda: [0, 5, 10, 15, 20, 30, 40, 50])
    wavelength_um: float = Field(1.55, gt=0)
    wg_length_um: float = Field(390.0, gt=0)
    heater_length_um: float = Field(390.0, gt=0)
    half_width_um: float = Field(25.0, gt=0)
    substrate_depth_um: float = Field(10.0, gt=0)
    h_fine_um: float = Field(0.05, gt=0)
    h_max_um: float = Field(1.0, gt=0)
    h_air: float = Field(10.0, ge=0)
    t_bc: float = Field(300.0, gt=0)

    def cross_section(self) -> CrossSection:
        return CrossSection(
            half_width=self.half_width_um,
            substrate_depth=self.substrate_depth_um,
            heater_length=self.heater_length_um,
            t_bc=self.t_bc,
            h_air=self.h_air,
            h_fine=self.h_fine_um,
            h_max=self.h_max_um,
        )


class MmiAnalysisConfig(_Model):
    er_bound_db: float = Field(50.0, gt=0)
    t32: float = Field(0.4821, gt=0)
    t42: float = Field(0.4819, gt=0)
    contour_er_db: list[float] = Field(default_factory=lambda: [30.0, 40.0, 50.0])
    r_min: float = Field(1.0, gt=0)
    r_max: float = Field(1.02, gt=0)
    n_r: int = Field(21, ge=2)
    grid: int = Field(400, ge=2)
    n_theta: int = Field(720, ge=4)


class Scenario(_Model):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    schema_version: Literal[1] = Field(alias="schema")
    name: str = "scenario"
    seed: int = 0
    mode: Literal["constrained", "nonconstraint"] = "constrained"
    chain: ChainSpec | None = None
    instrument: InstrumentSpec = Field(default_factory=InstrumentSpec)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    fidelity: FidelityConfig = Field(default_factory=FidelityConfig)
    thermal: ThermalConfig = Field(default_factory=ThermalConfig)
    mmi: MmiAnalysisConfig = Field(default_factory=MmiAnalysisConfig)

    @model_validator(mode="after")
    def _mode_fits_chain(self):
        if self.mode == "nonconstraint" and self.chain is not None and len(self.chain.stages) < 3:
            raise ValueError("nonconstraint mode needs a chain of at least 3 stages")
        return self

    def require_chain(self) -> ChainSpec:
        if self.chain is None:
            raise ConfigError(f"scenario {self.name!r} has no chain block")
        return self.chain


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_scenario(data: object, source: str = "<scenario>") -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping at the top level")
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e)}") from e


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e.strerror}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path} is not valid YAML/JSON: {e}") from e
    return parse_scenario(data, str(path))
