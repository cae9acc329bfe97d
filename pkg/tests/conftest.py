import numpy as np
import pytest

from headkv.harness.config import ExperimentConfig, GridConfig, OracleModel
from headkv.toymodel import planted_oracle


@pytest.fixture
def small_oracle_cfg():
    """4x4 oracle, short grid: seconds-scale runs for harness tests."""
    model = OracleModel(planted_oracle(4, 4, 0.25, 0.9, seed=1))
    return ExperimentConfig(model=model, grid=GridConfig([128, 256], [0.0, 0.5, 1.0]),
                            corpus_seed=5, n_examples=4, n_eval_examples=2)


def random_scores(rng: np.random.Generator, shape):
    raw = rng.random(shape)
    return raw / raw.sum()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
