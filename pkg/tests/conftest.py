import numpy as np
import pytest

from telereg.dataset import build_dataset
from telereg.shapes import make_shape


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Four chair pairs, all in the training split."""
    root = tmp_path_factory.mktemp("small_data")
    shapes = [(f"chair{i}", make_shape("chair", np.random.default_rng(200 + i))) for i in range(4)]
    build_dataset(shapes, root, "chair", 4, seed=0, split_ratios=(1.0, 0.0, 0.0), workers=1)
    return root


_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    """Record one criterion verdict; the lines are printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (passed, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
