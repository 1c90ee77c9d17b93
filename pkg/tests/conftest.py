import math

import pytest

from cpscal.config import CalibrationConfig
from cpscal.device_sim import ChainModel, InstrumentModel, SimulatedDevice, TopsGroundTruth

# measured six-stage chain at 20 C
MEASURED_K = (0.1427, 0.1459, 0.1515, 0.1478, 0.1517, 0.1470)
MEASURED_DTHETA = (0.4863, -0.2177, 0.106, 0.6925, 1.1762, 0.7244)
MEASURED_PMIN = (18.6075, 1.4921, 20.0369, 16.5703, 12.9558, 16.4435)

K_TOL = 1e-3
DTHETA_TOL = 2e-2


def make_chain(ks, dthetas, **kwargs) -> ChainModel:
    return ChainModel.uniform(
        [TopsGroundTruth(k=k, dtheta=d) for k, d in zip(ks, dthetas)], **kwargs
    )


@pytest.fixture
def instrument():
    return InstrumentModel()


@pytest.fixture
def config():
    return CalibrationConfig()


@pytest.fixture
def six_chain():
    return make_chain(MEASURED_K, MEASURED_DTHETA)


@pytest.fixture
def six_device(six_chain, instrument):
    return SimulatedDevice(six_chain, instrument)


@pytest.fixture
def one_cps_chain():
    return make_chain([0.15], [-0.3])


def pmin_of(k: float, dtheta: float) -> float:
    """First power at which the stage phase is a multiple of pi."""
    return ((-dtheta) % math.pi) / k
