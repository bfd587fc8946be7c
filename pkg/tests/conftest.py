import pytest
import torch

from kvedit.numerics import configure_determinism

configure_determinism()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config._acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config._acceptance_lines):
            terminalreporter.write_line(line)
