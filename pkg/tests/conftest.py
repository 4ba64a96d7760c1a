import copy

import pytest
import torch

from zlalign.harness import Workspace, resolve_config

torch.set_num_threads(1)

# criterion number -> (title, outcome)
_ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, [title, "PASS"])
    if report.failed:
        entry[1] = "FAIL"
    elif report.skipped and call.when == "setup":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {outcome}  {title}")


@pytest.fixture(scope="session")
def backend_cache(tmp_path_factory):
    """Directory holding the pretrained toy backend, built once per session."""
    path = tmp_path_factory.mktemp("backend-cache")
    Workspace(resolve_config(), cache_dir=path).backend
    return path


@pytest.fixture
def ws(backend_cache):
    """Fresh workspace with its own copy of the pretrained toy backend."""
    return Workspace(resolve_config(), cache_dir=backend_cache)


@pytest.fixture
def make_ws(backend_cache):
    def make(**overrides):
        return Workspace(resolve_config(overrides=copy.deepcopy(overrides)), cache_dir=backend_cache)

    return make
