import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    entry = _criteria.setdefault(num, (title, []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append("pass" if rep.passed else ("skip" if rep.skipped else "fail"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, results = _criteria[num]
        status = "FAIL" if "fail" in results else ("SKIP" if not results or "skip" in results else "PASS")
        terminalreporter.write_line(f"criterion {num:2d} {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
