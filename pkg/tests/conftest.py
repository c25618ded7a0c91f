import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_dataset():
    from vampire.synthdata import GenConfig, generate_dataset
    return generate_dataset(GenConfig(n_patients=12, image_size=32, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record (and print) the one-line verdict for an acceptance criterion."""
    def _report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
