import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Append one ``PASS``/``FAIL`` line to the acceptance summary."""
    def add(number, ok: bool, text: str):
        ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")
        print(ACCEPTANCE[-1])
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
