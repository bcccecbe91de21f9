import os
from pathlib import Path

import pytest

MNIST_CANDIDATES = [os.environ.get("MNIST_DIR"), "/root/data/mnist", str(Path(__file__).parent / "data" / "mnist")]

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")


def mnist_dir():
    for cand in filter(None, MNIST_CANDIDATES):
        if any((Path(cand) / f"t10k-labels-idx1-ubyte{ext}").exists() for ext in ("", ".gz")):
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not found (set MNIST_DIR)")
    return path


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _criteria.setdefault(n, {"title": title, "status": "PASS", "detail": ""})
    if call.excinfo is None:
        return
    if call.excinfo.errisinstance(pytest.skip.Exception):
        if entry["status"] == "PASS":
            entry["status"] = "SKIP"
            entry["detail"] = str(call.excinfo.value)
        return
    entry["status"] = "FAIL"
    msg = str(call.excinfo.value).strip().splitlines()
    entry["detail"] = msg[0] if msg else call.excinfo.typename


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:2d} [{e['status']}] {e['title']}"
        if e["status"] != "PASS" and e["detail"]:
            line += f" ({e['detail']})"
        tr.write_line(line)
