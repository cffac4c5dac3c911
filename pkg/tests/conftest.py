import pytest

from koopman_sp.cycle import find_limit_cycle
from koopman_sp.model import van_der_pol
from koopman_sp.ode import IntegratorConfig

_CYCLES = {}


def cached_cycle(eps):
    if eps not in _CYCLES:
        _CYCLES[eps] = (van_der_pol(eps), find_limit_cycle(van_der_pol(eps), IntegratorConfig()))
    return _CYCLES[eps]


@pytest.fixture(scope="session")
def vdp1():
    return cached_cycle(1.0)


@pytest.fixture(scope="session")
def vdp01():
    return cached_cycle(0.1)


@pytest.fixture(scope="session")
def vdp001():
    return cached_cycle(0.01)
