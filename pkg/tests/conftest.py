import pytest

from spsafe.systems import ArmParams, PrimalDualParams, ToyParams, arm_bundle, pd_bundle, toy_bundle

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def toy():
    return toy_bundle(ToyParams())


@pytest.fixture(scope="session")
def arm():
    return arm_bundle(ArmParams())


@pytest.fixture(scope="session")
def pd():
    return pd_bundle(PrimalDualParams())


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion."""

    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
