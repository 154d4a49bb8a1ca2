import numpy as np
import pytest

from peerexposure.synthetic import SimSpec, simulate

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    def record(criterion: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_market():
    """40 stocks, 8 months, dispersed betas."""
    spec = SimSpec(n_stocks=40, n_months=8, beta_sd=0.3, seed=11)
    return simulate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
