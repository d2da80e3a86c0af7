import numpy as np
import pytest

from rbsde.catalog.domains import SectorDomainSpec, make_ball, make_polar_star, make_sector_domain, PolarStarSpec
from rbsde.geometry.pseudo import build_pseudo_distance

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ball():
    dom, core = make_ball(1.0)
    return dom, core, build_pseudo_distance(dom, core)


@pytest.fixture(scope="session")
def star():
    dom, core = make_polar_star(PolarStarSpec(cos_coeffs=(1.0, 0.0, 0.0, 0.3)))
    return dom, core


@pytest.fixture(scope="session")
def sector07():
    sec = make_sector_domain(SectorDomainSpec(alpha=0.7))
    return sec, build_pseudo_distance(sec.domain, sec.core)


@pytest.fixture(scope="session")
def sector_pi4():
    return make_sector_domain(SectorDomainSpec(alpha=np.pi / 4, eta=0.2))
