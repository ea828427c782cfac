import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from halftone_shield import data  # noqa: E402
from halftone_shield.model import init  # noqa: E402
from halftone_shield.training import TrainConfig, train  # noqa: E402


@pytest.fixture(scope="session")
def small_set():
    return data.load(1200, 200, seed=3)


@pytest.fixture(scope="session")
def trained_model(small_set):
    """A briefly trained model; good enough that attacks have something to break."""
    train_set, _ = small_set
    cfg = TrainConfig(epochs=6, batch_size=32, learning_rate=0.05, lr_decay_epochs=(5,), seed=1)
    return train(init(0), train_set.images, train_set.labels, cfg)


# ------------------------------------------------------------ acceptance report

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, title, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(n: int, title: str, ok: bool, detail: str) -> bool:
        _CRITERIA[n] = (bool(ok), title, detail)
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
