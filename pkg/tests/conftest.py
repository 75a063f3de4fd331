import re

import numpy as np
import pytest

from isacbeam.config import SystemConfig, default_scenario_path, load_config

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        n = int(m.group(1))
        if n not in _CRITERIA or report.failed:
            _CRITERIA[n] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")


@pytest.fixture(scope="session")
def table2():
    return load_config(default_scenario_path())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    return SystemConfig(num_tx_antennas=4, num_rx_antennas=4)
