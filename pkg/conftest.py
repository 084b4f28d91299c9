import numpy as np
import pytest

from lamp import Corpus, HistoryDistribution, LampModel, SparseStochasticMatrix, Vocabulary


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo or training runs")


TWO_STATE = [[0.9, 0.1], [0.2, 0.8]]


@pytest.fixture
def two_state_matrix():
    return SparseStochasticMatrix.from_dense(TWO_STATE)


@pytest.fixture
def two_state_model(two_state_matrix):
    """The worked 2-state example: w = (0.6, 0.4)."""
    return LampModel(HistoryDistribution([0.6, 0.4]), two_state_matrix, Vocabulary(("a", "b")))


@pytest.fixture
def worked_corpus():
    return Corpus(Vocabulary(("a", "b")), ([0, 1, 1],))


def cycle_matrix(n: int, epsilon: float) -> SparseStochasticMatrix:
    """State 0 loops with probability ``epsilon``; every other state steps to the next."""
    rows = [[(0, epsilon), (1, 1.0 - epsilon)]]
    rows += [[((i + 1) % n, 1.0)] for i in range(1, n)]
    return SparseStochasticMatrix.from_rows(rows)


@pytest.fixture
def cycle_model():
    def build(n: int = 4, epsilon: float = 0.3, weights=(0.5, 0.5)) -> LampModel:
        vocab = Vocabulary(tuple(f"s{i}" for i in range(n)))
        return LampModel(HistoryDistribution(list(weights)), cycle_matrix(n, epsilon), vocab)
    return build


def random_dense_stochastic(rng: np.random.Generator, n: int) -> np.ndarray:
    m = rng.random((n, n)) + 0.05
    return m / m.sum(axis=1, keepdims=True)


@pytest.fixture
def random_model():
    """Factory for random ergodic LAMP instances with full support."""
    def build(n: int, k: int, seed: int) -> LampModel:
        rng = np.random.default_rng(seed)
        P = SparseStochasticMatrix.from_dense(random_dense_stochastic(rng, n))
        w = HistoryDistribution.normalized(rng.random(k) + 0.05)
        return LampModel(w, P, Vocabulary(tuple(f"t{i}" for i in range(n))))
    return build
