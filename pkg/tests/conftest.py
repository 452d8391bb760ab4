import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from llspin.experiments import Experiment, load_scenario  # noqa: E402
from llspin.relaxation import larmor_frequency  # noqa: E402
from llspin.spin import pcba_system  # noqa: E402


@pytest.fixture(scope="session")
def pcba():
    return pcba_system()


@pytest.fixture(scope="session")
def omega0():
    return larmor_frequency(11.7)


@pytest.fixture(scope="session")
def thermal_scenario():
    return load_scenario("pcba-thermal-300K")


@pytest.fixture(scope="session")
def thermal_experiment(thermal_scenario):
    return Experiment(thermal_scenario)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
