import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", deadline=None, max_examples=30)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=5)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def camera():
    from celmnav.imagery import CameraModel

    return CameraModel()


@pytest.fixture(scope="session")
def tiny_data():
    """Small in-memory (delta, rho) dataset shared by the learning tests."""
    from celmnav.imagery import make_body
    from celmnav.search import prepare_dataset

    return prepare_dataset(make_body("D", 0), sizes=(40, 12, 12), cloud_seed=3, master_seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(num: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {num} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE[num] = line
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
