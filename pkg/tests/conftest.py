import pytest
import torch

from multistylegan.data import write_synthetic_dataset

torch.set_num_threads(1)

_ACCEPTANCE = []


@pytest.fixture
def synthetic_tree(tmp_path):
    """Two sequences of lengths 9 and 10 at 16x16."""
    return write_synthetic_dataset(tmp_path / "data", resolution=16, lengths=[9, 10], seed=3)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE.append((props["criterion"], report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, duration in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({duration:.1f}s)")
