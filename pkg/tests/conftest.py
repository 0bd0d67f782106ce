import numpy as np
import pytest

from tgseg.autodiff import Tensor

SEEDS = list(range(20))


def t64(rng, *shape, scale=1.0, grad=True):
    return Tensor(rng.normal(0, scale, shape), requires_grad=grad, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 20-sample dataset (14/3/3 split) shared by the training tests."""
    from tgseg.data import generate_dataset
    out = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(20, 3, out)
    return out / "manifest.json"


@pytest.fixture
def tiny_cfg(tiny_data):
    from tgseg.config import ExperimentConfig
    return ExperimentConfig.from_dict({"data": {"path": str(tiny_data)},
                                       "train": {"steps": 3, "batch": 2, "eval_every": 2}})


# acceptance verdicts, filled by tests/test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k}. {name}: {detail}")
