"""
2x2 Jones algebra for MMI couplers, phase shifters and MZIs.

Vectors are columns and matrices act on the left. Stage lists are given in
physical order (first optical element first) and reversed for the product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from cpscal.errors import ParameterError

SQRT1_2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class JonesVector:
    up: complex
    down: complex

    @classmethod
    def from_array(cls, a: np.ndarray) -> JonesVector:
        return cls(complex(a[0]), complex(a[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.up, self.down], dtype=np.complex128)

    @property
    def norm2(self) -> float:
        return abs(self.up) ** 2 + abs(self.down) ** 2


# light injected into port 2
PORT2 = JonesVector(0j, 1 + 0j)


@dataclass(frozen=True)
class TransferMatrix:
    m11: complex
    m12: complex
    m21: complex
    m22: complex

    @classmethod
    def from_array(cls, a: np.ndarray) -> TransferMatrix:
        return cls(complex(a[0, 0]), complex(a[0, 1]), complex(a[1, 0]), complex(a[1, 1]))

    def as_array(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m21, self.m22]], dtype=np.complex128)

    def __matmul__(self, other):
        if isinstance(other, TransferMatrix):
            return TransferMatrix.from_array(self.as_array() @ other.as_array())
        if isinstance(other, JonesVector):
            return JonesVector.from_array(self.as_array() @ other.as_array())
        return NotImplemented

    def transpose(self) -> TransferMatrix:
        return TransferMatrix(self.m11, self.m21, self.m12, self.m22)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.as_array(), compute_uv=False)


@dataclass(frozen=True)
class MmiParams:
    """Splitting ratio and per-branch attenuation (nepers) of a 2x2 MMI."""

    eta: float = 0.5
    tau: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ParameterError(f"eta must lie in (0, 1), got {self.eta}")
        if self.tau < 0.0 or self.kappa < 0.0:
            raise ParameterError(f"attenuation must be >= 0, got tau={self.tau} kappa={self.kappa}")

    @property
    def lossless(self) -> bool:
        return self.tau == 0.0 and self.kappa == 0.0


IDEAL_MMI = MmiParams()


class Equivalent(str, Enum):
    CROSS = "cross"
    DIRECT = "direct"
    QUAD_PLUS = "quad_plus"
    QUAD_MINUS = "quad_minus"
    GENERIC = "generic"


def mmi_array(params: MmiParams = IDEAL_MMI) -> np.ndarray:
    a = math.exp(-params.tau / 2.0)
    b = math.exp(-params.kappa / 2.0)
    s = math.sqrt(params.eta)
    c = math.sqrt(1.0 - params.eta)
    return np.array([[a * s, 1j * a * c], [1j * b * c, b * s]], dtype=np.complex128)


def mmi(params: MmiParams = IDEAL_MMI) -> TransferMatrix:
    """
    Transfer matrix of a 2x2 MMI.

    Examples
    --------
    >>> m = mmi()
    >>> round(abs(m.m11) ** 2, 12), round(abs(m.m12) ** 2, 12)
    (0.5, 0.5)
    """
    return TransferMatrix.from_array(mmi_array(params))


def phase_shifter(theta: float) -> TransferMatrix:
    """diag(exp(i*theta), 1): the shift sits on the upper arm."""
    return TransferMatrix(complex(np.exp(1j * theta)), 0j, 0j, 1 + 0j)


def mzi(theta: float, params: MmiParams = IDEAL_MMI) -> TransferMatrix:
    """
    MMI - phase shifter - MMI.

    Examples
    --------
    >>> m = mzi(math.pi / 3)
    >>> round(abs(m.m22) ** 2, 12)
    0.25
    """
    return compose([mmi(params), phase_shifter(theta), mmi(params)])


def compose(stages: Sequence[TransferMatrix]) -> TransferMatrix:
    if not stages:
        raise ParameterError("compose needs at least one stage")
    total = np.eye(2, dtype=np.complex128)
    for stage in stages:
        total = stage.as_array() @ total
    return TransferMatrix.from_array(total)


def intensities(v: JonesVector) -> tuple[float, float]:
    return abs(v.up) ** 2, abs(v.down) ** 2


def _near(theta: float, target: float, tol: float) -> bool:
    d = math.remainder(theta - target, 2.0 * math.pi)
    return abs(d) <= tol


def classify_equivalent(theta: float, tol: float = 1e-6) -> Equivalent:
    """Which special structure an MZI at `theta` reduces to, modulo 2*pi."""
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if _near(theta, 0.0, tol):
        return Equivalent.CROSS
    if _near(theta, math.pi, tol):
        return Equivalent.DIRECT
    if _near(theta, math.pi / 2.0, tol):
        return Equivalent.QUAD_PLUS
    if _near(theta, 1.5 * math.pi, tol):
        return Equivalent.QUAD_MINUS
    return Equivalent.GENERIC


def global_phase_quotient(a: TransferMatrix, b: TransferMatrix) -> complex | None:
    """
    Scalar s with a == s * b, or None when no such scalar exists.

    Used for global-phase-insensitive comparisons.
    """
    aa, bb = a.as_array(), b.as_array()
    idx = np.unravel_index(np.argmax(np.abs(bb)), bb.shape)
    if abs(bb[idx]) == 0.0:
        return None
    s = aa[idx] / bb[idx]
    if not np.allclose(aa, s * bb, atol=1e-12, rtol=0.0):
        return None
    return complex(s)


def imbalanced_mzi_intensities(
    params: MmiParams, theta: np.ndarray | float
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (I3, I4) of an MZI built from two identical imperfect MMIs, port-2 input."""
    theta = np.asarray(theta, dtype=np.float64)
    eta, tau, kappa = params.eta, params.tau, params.kappa
    cross = 2.0 * math.exp(-(tau + kappa) / 2.0)
    i3 = (
        math.exp(-tau)
        * (1.0 - eta)
        * eta
        * (math.exp(-tau) + math.exp(-kappa) + cross * np.cos(theta))
    )
    i4 = math.exp(-kappa) * (
        math.exp(-tau) * (1.0 - eta) ** 2
        + math.exp(-kappa) * eta**2
        - cross * (1.0 - eta) * eta * np.cos(theta)
    )
    return i3, i4
