import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poredet.datasets import SyntheticParams, synthesize

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def synth_sample():
    return synthesize(SyntheticParams(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or "::test_criterion_" not in report.nodeid:
        return
    n = int(report.nodeid.split("::test_criterion_")[1].split("_")[0])
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if n not in _ACCEPTANCE or outcome != "PASS":
            _ACCEPTANCE[n] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {outcome}  {detail}")
