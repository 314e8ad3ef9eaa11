import numpy as np
import pytest

from datamark.core import Dataset
from datamark.datasets import SyntheticSpec, generate_synthetic
from datamark.watermark import WatermarkKey, make_square_trigger


@pytest.fixture(scope="session")
def small_split():
    return generate_synthetic(SyntheticSpec(num_classes=4, per_class=150, shape=(3, 8, 8), seed=3))


@pytest.fixture(scope="session")
def square_key():
    return WatermarkKey(make_square_trigger((3, 8, 8)), target_label=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, n=20, shape=(3, 4, 5), k=3) -> Dataset:
    c, w, h = shape
    return Dataset(rng.integers(0, 256, size=(n, c, h, w)), rng.integers(0, k, size=n), k)


# (criterion number, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number}] {title}: {detail}")
