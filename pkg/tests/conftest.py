import os

import pytest

from retina_grader import kernels


@pytest.fixture(params=kernels.available())
def backend(request):
    """Run the test once per available kernel backend."""
    prev = kernels.use(request.param)
    yield request.param
    kernels.use(prev)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small synthetic dataset (8 per grade, 64x64) shared across tests."""
    from retina_grader.data import generate_synthetic_dataset

    d = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(8, 11, d, 64)
    return d


def pytest_report_header(config):
    return f"retina_grader kernel backends: {kernels.available()} (active {kernels.active()}); " \
           f"RETINA_GRADER_BACKEND={os.environ.get('RETINA_GRADER_BACKEND', 'unset')}"


_VERDICTS = []


@pytest.fixture
def verdict():
    """record(criterion, passed, detail) -> passed; lines are printed after the run."""

    def record(criterion, passed, detail):
        tag = "PASS" if passed is True else ("FAIL" if passed is False else passed)
        _VERDICTS.append((criterion, f"{tag:<4s}  [{criterion:>2}] {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
            terminalreporter.write_line(line)
