import pytest

from cxrvgg.trainer import synth_dataset

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    _criteria.append((marker.args[0], call.excinfo is None))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in _criteria:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """30 images per class at 32x32, seed 0."""
    root = tmp_path_factory.mktemp("synth")
    synth_dataset(root, 30, 32, seed=0)
    return root


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """10 images per class at 16x16."""
    root = tmp_path_factory.mktemp("small")
    synth_dataset(root, 10, 16, seed=3)
    return root
