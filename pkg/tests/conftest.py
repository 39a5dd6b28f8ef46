import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
BENCH = FIXTURES / "bench"


@pytest.fixture
def bench_dir():
    return BENCH


@pytest.fixture
def bench_records_path():
    return BENCH / "records.jsonl"


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(name, rows):
        path = tmp_path / name
        path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        return path

    return _write


# criterion number -> (title, passed so far)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    _, ok = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, ok and not report.failed and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
