import pytest
import torch

from mcactrl.denoiser import ToyDenoiser

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_model():
    return ToyDenoiser().eval()


@pytest.fixture(scope="session")
def toy_model64():
    return ToyDenoiser().double().eval()


_criteria: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    measured = dict(item.user_properties).get("measured", "")
    _criteria.append(("PASS" if report.passed else "FAIL", marker.args[0], measured))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, name, measured in _criteria:
        terminalreporter.write_line(f"{status} {name}" + (f": {measured}" if measured else ""))
