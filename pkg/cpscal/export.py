"""CSV and JSON artifacts written by the command line."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any

import pandas as pd

from cpscal import __version__
from cpscal.calibration import (
    CalibrationResult,
    SourcePass,
    StageCalibration,
    ThetaAtPmin,
)
from cpscal.errors import ConfigError

logger = logging.getLogger(__name__)

CALIBRATION_COLUMNS = (
    "stage",
    "P_min_mW",
    "k_rad_per_mW",
    "dtheta_rad",
    "dtheta_deg",
    "theta_at_pmin",
    "source_pass",
)


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(p, index=False, float_format="%.10g")
    logger.info("wrote %s (%d rows)", p, len(frame))
    return p


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(path: str | Path, payload: Any) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as handle:
        json.dump(_jsonable(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info("wrote %s", p)
    return p


def base_manifest(command: str, scenario: str, seed: int) -> dict[str, Any]:
    return {
        "schema_version": 1,
        "command": command,
        "scenario": scenario,
        "seed": seed,
        "cpscal_version": __version__,
    }


def calibration_report(result: CalibrationResult, manifest: dict[str, Any]) -> dict[str, Any]:
    passes = []
    for rec in result.passes:
        entry = rec.as_dict()
        if rec.trace is not None:
            entry["trace"] = {
                "P_mW": rec.trace.outer_power.tolist(),
                "U_P": rec.trace.u_p.tolist(),
            }
        passes.append(entry)
    return {
        **manifest,
        "mode": result.mode,
        "stages": result.to_frame().to_dict(orient="records"),
        "constrained_stages": [s.stage for s in result if s.constrained],
        "passes": passes,
    }


def read_calibration_csv(path: str | Path) -> CalibrationResult:
    """loads a calibration written by `cpscal calibrate`"""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ConfigError(f"cannot read calibration file {path}: {e}") from e
    missing = [c for c in CALIBRATION_COLUMNS if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
    stages = []
    for row in frame.sort_values("stage").itertuples(index=False):
        p_max = ((0.5 * math.pi - row.dtheta_rad) % (2.0 * math.pi)) / row.k_rad_per_mW
        stages.append(
            StageCalibration(
                stage=int(row.stage),
                k=float(row.k_rad_per_mW),
                dtheta=float(row.dtheta_rad),
                p_min=float(row.P_min_mW),
                p_max=p_max,
                theta_at_pmin=ThetaAtPmin(row.theta_at_pmin),
                source_pass=SourcePass(row.source_pass),
            )
        )
    return CalibrationResult(tuple(stages))
