import pytest

from fjlab.topology import HeavyTrafficSequence, figure2_network

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def fig2():
    return figure2_network()


@pytest.fixture(scope="session")
def fig2_seq(fig2):
    return HeavyTrafficSequence(fig2, (-1.0, -1.0), (5, 20))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
