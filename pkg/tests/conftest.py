import numpy as np
import pytest

from ksam.dataset import preprocess
from ksam.fixtures import make_fixture_dataset
from ksam.prelim_seg import MeanMaskPrior


@pytest.fixture(scope="session")
def train_fixtures():
    return make_fixture_dataset(20, seed=1)


@pytest.fixture(scope="session")
def test_fixtures():
    return make_fixture_dataset(10, seed=2)


@pytest.fixture(scope="session")
def prior_models(train_fixtures):
    ps = [preprocess(s) for s in train_fixtures]
    X = np.stack([p.gray for p in ps])
    lung = MeanMaskPrior(target="lung").fit(X, np.stack([p.lung_mask_small for p in ps]))
    heart = MeanMaskPrior(target="heart").fit(X, np.stack([p.heart_mask_small for p in ps]))
    return lung, heart


_ACCEPTANCE = []


@pytest.fixture
def accept():
    """Record one acceptance criterion outcome, then assert it."""

    def _record(criterion, ok, detail=""):
        _ACCEPTANCE.append((criterion, bool(ok), detail))
        print(f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"acceptance criterion {criterion} failed: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{criterion:>4}  {'PASS' if ok else 'FAIL'}  {detail}")
