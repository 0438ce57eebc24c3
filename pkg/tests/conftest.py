import pytest

from helpers import small_network
from miasrec.sessions import make_example


@pytest.fixture
def net():
    return small_network()


@pytest.fixture
def example():
    return make_example((1, 3, 2, 3), 5)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
