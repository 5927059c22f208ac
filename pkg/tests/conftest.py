import pytest

RESULTS: dict[int, tuple[str, bool, str]] = {}


class Criterion:
    """Records one acceptance criterion's outcome for the terminal summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.details = number, title, []

    def note(self, text: str) -> None:
        self.details.append(text)

    def check(self, ok: bool, text: str) -> None:
        self.note(("ok   " if ok else "FAIL ") + text)
        assert ok, text


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else True
    RESULTS[c.number] = (c.title, not failed, "; ".join(c.details))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, ok, details = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {details}")
