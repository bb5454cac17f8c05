import math
import sys

import numpy as np
import pytest

from ccmkit.ccm import Region, synthesize_ccm, synthesize_robust
from ccmkit.sysmodel import builtin, make_system


@pytest.fixture(scope="session")
def mg():
    return builtin("moore-greitzer")


@pytest.fixture(scope="session")
def scalar_sys():
    """x' = x + u, y = x."""
    return make_system("scalar", ("x",), ("u",), f=["x"], B=[[1]], g=["x"])


@pytest.fixture(scope="session")
def mg_region():
    return Region.box((0.0, 0.0), (math.inf, 5.0))


@pytest.fixture(scope="session")
def mg_cert(mg, mg_region):
    """Constant W, quadratic Y, rate 0.5 on |phi| <= 5."""
    return synthesize_ccm(mg, mg_region, 0.5)


@pytest.fixture(scope="session")
def mg_cert_r1(mg):
    return synthesize_ccm(mg, Region.box((0.0, 0.0), (math.inf, 1.0)), 0.5)


@pytest.fixture(scope="session")
def mg_robust_r1(mg):
    return synthesize_robust(mg, [[0.0, 1.0]], [[0.1]], radius=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mg_robust_r1_sim(mg):
    """r = 1 robust certificate with W >= 0.1 I, so its gains stay simulable at step 0.01."""
    return synthesize_robust(mg, [[0.0, 1.0]], [[0.1]], radius=1.0, alpha1=0.1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
