import pytest
import torch

from difo.benchmark import build_benchmark

torch.set_num_threads(1)

# acceptance.py appends (criterion, passed, detail) here; printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number, passed, detail in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}")


@pytest.fixture(scope="session")
def toy():
    return build_benchmark(seed=0)


@pytest.fixture(scope="session")
def toy_oracle_logits(toy):
    return toy.oracle_logits()


@pytest.fixture(scope="session")
def toy_adapted(toy, toy_oracle_logits):
    return toy.adapt(oracle_logits=toy_oracle_logits, check_frozen=True)
