import numpy as np
import pytest

from condscore.oracles import GaussianSpec, JointGaussianSpec
from condscore.sde import MultiBlockSdeSpec, VeSdeSpec


@pytest.fixture
def spec50():
    return VeSdeSpec(0.01, 50.0)


@pytest.fixture
def bivariate08():
    return JointGaussianSpec.bivariate(0.8)


def two_block(sx=(0.01, 10.0), sy=(0.01, 1.0), n_x=2, n_y=2):
    return MultiBlockSdeSpec.two_block(n_x, VeSdeSpec(*sx), n_y, VeSdeSpec(*sy))


def random_joint(rng, n_x, n_y):
    d = n_x + n_y
    a = rng.standard_normal((d, d))
    cov = a @ a.T / d + 0.3 * np.eye(d)
    return JointGaussianSpec(GaussianSpec(rng.standard_normal(d), cov), n_x, n_y)


# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and report.failed and "test_criterion_" in report.nodeid:
        n = int(report.nodeid.split("test_criterion_")[1][:2])
        ACCEPTANCE.setdefault(n, f"criterion {n:2d}: FAIL  (raised before a verdict)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:2d}: NOT RUN"))
