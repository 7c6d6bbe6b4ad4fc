import pytest

from dgc import kernels
from dgc.data_io import SynthSpec, write_dataset


@pytest.fixture(params=sorted(kernels.implementations()))
def backend(request):
    """Each available kernel backend in turn."""
    return kernels.implementations()[request.param]


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    write_dataset(SynthSpec(n_cubes=3, height=24, width=24, bands=12, n_classes=2, seed=5), root)
    return root


# ------------------------------------------------------ acceptance reporting

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    n, title = marker.args
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    if report.when != "call" and status == "PASS":
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{status} {n}. {title}" + (f": {detail}" if detail else ""))
