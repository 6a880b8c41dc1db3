import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(pytestconfig):
    """Record ``(passed, detail)`` per criterion id; printed in the terminal summary."""
    results = pytestconfig.stash[_ACCEPTANCE]

    def record(key: str, passed: bool, detail: str) -> bool:
        results[key] = (passed, detail)
        print(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(results, key=lambda k: int(k[1:])):
        passed, detail = results[key]
        terminalreporter.write_line(f"{key:>4} {'PASS' if passed else 'FAIL'}  {detail}")
