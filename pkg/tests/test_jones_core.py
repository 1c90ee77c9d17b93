import cmath
import math

import numpy as np
import pytest

from cpscal.errors import ParameterError
from cpscal.jones_core import (
    IDEAL_MMI,
    PORT2,
    Equivalent,
    MmiParams,
    TransferMatrix,
    classify_equivalent,
    compose,
    global_phase_quotient,
    imbalanced_mzi_intensities,
    intensities,
    mmi,
    mzi,
    phase_shifter,
)


def test_ideal_mmi_is_unitary_and_balanced():
    m = mmi().as_array()
    assert np.allclose(m.conj().T @ m, np.eye(2))
    assert np.allclose(np.abs(m) ** 2, 0.5)


@pytest.mark.parametrize("eta", [0.0, 1.0, -0.1, 1.5])
def test_mmi_rejects_bad_splitting(eta):
    with pytest.raises(ParameterError):
        MmiParams(eta=eta)


def test_negative_loss_rejected():
    with pytest.raises(ParameterError):
        MmiParams(tau=-0.1)


def test_mzi_at_zero_is_cross():
    q = global_phase_quotient(mzi(0.0), TransferMatrix(0j, 1 + 0j, 1 + 0j, 0j))
    assert q is not None
    assert abs(abs(q) - 1.0) < 1e-12


def test_mzi_at_pi_is_direct():
    q = global_phase_quotient(mzi(math.pi), TransferMatrix(-1 + 0j, 0j, 0j, 1 + 0j))
    assert q is not None
    assert abs(abs(q) - 1.0) < 1e-12


def test_mzi_at_half_pi_is_mmi_with_quadrature_delays():
    quad = compose([phase_shifter(math.pi / 2), mmi(), phase_shifter(math.pi / 2)])
    q = global_phase_quotient(mzi(math.pi / 2), quad)
    assert q is not None
    assert q == pytest.approx(cmath.exp(1j * 7 * math.pi / 4), abs=1e-12)


@pytest.mark.parametrize("theta", np.linspace(0.0, 2 * math.pi, 13))
def test_port2_to_port4_intensity(theta):
    _, i4 = intensities(mzi(theta) @ PORT2)
    assert i4 == pytest.approx(0.5 * (1.0 - math.cos(theta)), abs=1e-12)


def test_compose_empty_rejected():
    with pytest.raises(ParameterError):
        compose([])


def test_compose_order_is_physical():
    a, b = phase_shifter(0.3), mmi()
    assert np.allclose(compose([a, b]).as_array(), b.as_array() @ a.as_array())


def test_singular_values_of_lossless_chain():
    chain = compose([mmi(), phase_shifter(0.7), mmi(), phase_shifter(-1.1), mmi()])
    assert np.allclose(chain.singular_values(), 1.0)


def test_lossless_chain_conserves_power():
    chain = compose([mmi(), phase_shifter(0.7), mmi(), phase_shifter(-1.1), mmi()])
    assert PORT2.norm2 == 1.0
    assert (chain @ PORT2).norm2 == pytest.approx(1.0, abs=1e-12)


def test_lossy_coupler_drops_power():
    out = mmi(MmiParams(tau=0.2, kappa=0.1)) @ PORT2
    assert out.norm2 == pytest.approx(0.5 * (math.exp(-0.2) + math.exp(-0.1)), abs=1e-12)


@pytest.mark.parametrize(
    "theta,expected",
    [
        (0.0, Equivalent.CROSS),
        (2 * math.pi, Equivalent.CROSS),
        (math.pi, Equivalent.DIRECT),
        (-math.pi, Equivalent.DIRECT),
        (math.pi / 2, Equivalent.QUAD_PLUS),
        (3 * math.pi / 2, Equivalent.QUAD_MINUS),
        (0.4, Equivalent.GENERIC),
    ],
)
def test_classify_equivalent(theta, expected):
    assert classify_equivalent(theta) is expected


def test_global_phase_quotient_none_for_different_matrices():
    assert global_phase_quotient(mzi(0.3), mzi(0.4)) is None


def test_closed_form_reduces_to_ideal():
    theta = np.linspace(0.0, 2 * math.pi, 101)
    i3, i4 = imbalanced_mzi_intensities(IDEAL_MMI, theta)
    assert np.allclose(i3, 0.5 * (1 + np.cos(theta)), atol=1e-12)
    assert np.allclose(i4, 0.5 * (1 - np.cos(theta)), atol=1e-12)


def test_closed_form_matches_matrix_product():
    params = MmiParams(eta=0.48, tau=0.02, kappa=0.05)
    for theta in (0.0, 0.9, 2.5, 4.0):
        out = mzi(theta, params) @ PORT2
        i3, i4 = imbalanced_mzi_intensities(params, theta)
        assert intensities(out) == pytest.approx((float(i3), float(i4)), abs=1e-12)
