import pytest

RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the outcome of a numbered acceptance criterion for the summary."""
    store = request.config.stash.setdefault(RESULTS, {})

    def record(number, title, ok, detail=""):
        store[number] = (title, bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        title, ok, detail = store[n]
        terminalreporter.write_line("%s  %2d. %s | %s" % ("PASS" if ok else "FAIL", n, title, detail))
