import numpy as np
import pytest

from aschpuf.cell import ModelConfig, sample_chip


@pytest.fixture
def cfg():
    return ModelConfig()


@pytest.fixture
def chip(cfg):
    return sample_chip(cfg, "fixture", 32, 128)


@pytest.fixture
def small_chip(cfg):
    return sample_chip(cfg, "small", 8, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line per acceptance criterion, then assert."""
    def record(n: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
