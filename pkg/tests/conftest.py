import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from structs import structures as S
from structs.rho import RhoFunction
from structs.spherical import consistency_b0, constants_for, tune_cutoff

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# design matrix of the simulation study (intercept and one covariate)
X_SIM = np.array([
    [1.0, -0.9504967],
    [1.0, -0.5428346],
    [1.0, 1.6650521],
    [1.0, -0.1717207],
])


@pytest.fixture(scope="session")
def X_sim():
    return X_SIM.copy()


@pytest.fixture(scope="session")
def rho4():
    return RhoFunction("biweight", tune_cutoff("biweight", 4, 0.5))


@pytest.fixture(scope="session")
def b0_4(rho4):
    return consistency_b0(rho4, 4)


@pytest.fixture(scope="session")
def const4(rho4, b0_4):
    return constants_for(rho4, 4, b0_4)


@pytest.fixture(scope="session")
def alt1():
    return S.lmm(np.arange(1.0, 5.0))


@pytest.fixture(scope="session")
def alt2():
    return S.lmm(np.ones(4), [1.0, 4.0, 9.0, 16.0])


@pytest.fixture(scope="session")
def original():
    return S.lmm(np.ones(4))


def random_spd(rng, k):
    A = rng.normal(size=(k, k))
    return A @ A.T + k * np.eye(k)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
