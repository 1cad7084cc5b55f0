import numpy as np
import pytest

from epipretrain import model as M
from epipretrain.data import dataset_normalize
from epipretrain.synthetic import DiseaseSpec, SyntheticCorpusSpec, generate_datasets


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return M.ModelConfig(P=2, S=1, D=8, n_layers=1, n_heads=2, ffn_width=16, seed=3)


@pytest.fixture
def small_cfg():
    return M.ModelConfig(P=4, S=4, D=16, n_layers=1, n_heads=2, ffn_width=32, seed=0)


@pytest.fixture(scope="session")
def flu_datasets():
    spec = SyntheticCorpusSpec([
        DiseaseSpec("flu", peak_month=1, amplitude=2.0, noise=0.05, series=5, length=104),
        DiseaseSpec("typhoid", seasonal=False, amplitude=1.0, series=2, length=80),
    ])
    return [dataset_normalize(d) for d in generate_datasets(spec, 0)]


# Acceptance summary: tests/test_acceptance.py appends (criterion, ok, detail).
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
