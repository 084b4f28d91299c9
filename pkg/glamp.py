"""Generalized LAMP: one transition matrix per history lag.

A GLAMP picks lag ``i ~ w`` as a LAMP does, then steps from the clamped
state ``i`` back with matrix ``P^(f(i))``.  The matrix is chosen by the lag
index, also when the state index is clamped to the sequence start.  Its
long-run behaviour is that of the mixture ``sum_i w_i P^(f(i))``, which is
checked here through the exact k-th-order lift of the process.
"""
from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, EmptyRowError, SizeGuardError
from lamp import (
    Corpus,
    HistoryDistribution,
    LampModel,
    LikelihoodResult,
    SparseStochasticMatrix,
    Vocabulary,
    generate,
    log_likelihood,
    transition_distribution,
)

logger = logging.getLogger(__name__)

LIFT_STATE_LIMIT = 100_000
CONDITIONAL_ENTRY_LIMIT = 10_000_000


@dataclass(frozen=True, eq=False)
class GlampModel:
    w: HistoryDistribution
    matrices: Tuple[SparseStochasticMatrix, ...]
    lag_map: Tuple[int, ...]  # 0-based matrix index for lags 1..k
    vocab: Vocabulary

    def __post_init__(self):
        matrices = tuple(self.matrices)
        lag_map = tuple(int(f) for f in self.lag_map)
        object.__setattr__(self, "matrices", matrices)
        object.__setattr__(self, "lag_map", lag_map)
        if not matrices:
            raise DataError("a GLAMP needs at least one transition matrix")
        n = len(self.vocab)
        for j, matrix in enumerate(matrices):
            if matrix.n != n:
                raise DataError(f"matrix {j + 1} has {matrix.n} states but vocabulary has {n}")
        if len(lag_map) != self.w.k:
            raise DataError(f"lag map has {len(lag_map)} entries for k={self.w.k}")
        if any(not 0 <= f < len(matrices) for f in lag_map):
            raise DataError(f"lag map {[f + 1 for f in lag_map]} refers past {len(matrices)} matrices")

    @property
    def k(self) -> int:
        return self.w.k

    @property
    def n(self) -> int:
        return len(self.vocab)

    @property
    def num_parameters(self) -> int:
        return sum(m.support_size for m in self.matrices) + self.k

    def lag_matrices(self) -> List[SparseStochasticMatrix]:
        return [self.matrices[f] for f in self.lag_map]

    def matrix_weights(self) -> np.ndarray:
        """Total lag weight routed to each matrix."""
        return np.bincount(self.lag_map, weights=self.w.weights, minlength=len(self.matrices))

    def to_dict(self) -> Dict:
        return {
            "k": self.k,
            "w": [float(v) for v in self.w.weights],
            "n": self.n,
            "vocab": list(self.vocab.tokens),
            "rare_token": self.vocab.rare_token,
            "matrices": [m.triples() for m in self.matrices],
            "lag_map": [f + 1 for f in self.lag_map],
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> "GlampModel":
        try:
            vocab = Vocabulary(tuple(doc["vocab"]), doc.get("rare_token"))
            w = HistoryDistribution(doc["w"])
            n = int(doc["n"])
            matrices = []
            for triples in doc["matrices"]:
                arr = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
                matrices.append(SparseStochasticMatrix.from_triples(
                    n, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2]))
            lag_map = [int(f) - 1 for f in doc["lag_map"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed GLAMP document: {exc}") from exc
        return cls(w, tuple(matrices), tuple(lag_map), vocab)


def from_lamp(model: LampModel) -> GlampModel:
    return GlampModel(model.w, (model.P,), (0,) * model.k, model.vocab)


def recency_lag_map(k: int) -> Tuple[int, ...]:
    """Matrix 1 for the most recent state, matrix 2 for every older lag (0-based)."""
    return (0,) + (1,) * (k - 1)


def glamp_transition_distribution(model: GlampModel, history: Sequence[int]) -> np.ndarray:
    return transition_distribution(model, history)


def glamp_log_likelihood(model: GlampModel, corpus: Corpus, floor: Optional[float] = None) -> LikelihoodResult:
    return log_likelihood(model, corpus, floor=floor)


def glamp_generate(model: GlampModel, start: int, length: int, seed: Optional[int] = None) -> np.ndarray:
    return generate(model, start, length, seed)


def mixture_matrix(model: GlampModel) -> SparseStochasticMatrix:
    """Entrywise ``sum_i w_i P^(f(i))``."""
    weights = model.matrix_weights()
    used = np.flatnonzero(weights > 0)
    if used.size == 1:
        return model.matrices[used[0]]
    total = None
    for j in used:
        matrix = model.matrices[j]
        empty = matrix.empty_rows()
        if empty.size:
            raise EmptyRowError(int(empty[0]), model.vocab.tokens[empty[0]])
        term = matrix.to_scipy() * weights[j]
        total = term if total is None else total + term
    return SparseStochasticMatrix.from_scipy(total)


def _next_state_weights(model: GlampModel, context: Tuple[int, ...], lag_matrices) -> Dict[int, float]:
    """Sparse next-state law after a length-k context (most recent last)."""
    k = len(context)
    out: Dict[int, float] = {}
    for lag, (weight, matrix) in enumerate(zip(model.w.weights, lag_matrices), start=1):
        if weight == 0:
            continue
        state = context[k - lag]
        cols, probs = matrix.row(state)
        if cols.size == 0:
            raise EmptyRowError(state, model.vocab.tokens[state])
        for y, p in zip(cols.tolist(), probs.tolist()):
            out[y] = out.get(y, 0.0) + weight * p
    return out


@dataclass(frozen=True, eq=False)
class LiftedChain:
    """First-order chain on the reachable k-tuples of a GLAMP."""

    tuples: np.ndarray  # (m, k), most recent state last
    Q: SparseStochasticMatrix
    n: int

    def index(self) -> Dict[Tuple[int, ...], int]:
        return {tuple(row): i for i, row in enumerate(self.tuples.tolist())}

    def last_state_marginal(self, distribution: np.ndarray) -> np.ndarray:
        return np.bincount(self.tuples[:, -1], weights=distribution, minlength=self.n)


def lift_to_kth_order(model, start_states: Optional[Sequence[int]] = None) -> LiftedChain:
    """Breadth-first lift from the constant tuples ``(x, ..., x)``.

    Tuple ``(x_1..x_k)`` moves to ``(x_2..x_k, y)`` with probability
    ``sum_lag w_lag P^(f(lag))(x_{k+1-lag}, y)``; only positive transitions
    are kept.
    """
    n, k = len(model.vocab), model.w.k
    if n ** k > LIFT_STATE_LIMIT:
        raise SizeGuardError(f"lifting needs n^k <= {LIFT_STATE_LIMIT}, got {n}^{k}")
    if start_states is None:
        start_states = range(n)
    lag_matrices = model.lag_matrices()
    index: Dict[Tuple[int, ...], int] = {}
    queue = deque()
    for x in start_states:
        start = (int(x),) * k
        if start not in index:
            index[start] = len(index)
            queue.append(start)
    rows, cols, probs = [], [], []
    while queue:
        context = queue.popleft()
        i = index[context]
        for y, p in sorted(_next_state_weights(model, context, lag_matrices).items()):
            if p <= 0:
                continue
            nxt = context[1:] + (y,)
            if nxt not in index:
                index[nxt] = len(index)
                queue.append(nxt)
            rows.append(i)
            cols.append(index[nxt])
            probs.append(p)
    Q = SparseStochasticMatrix.from_triples(len(index), rows, cols, probs)
    tuples = np.asarray(list(index), dtype=np.int64).reshape(len(index), k)
    logger.debug("lifted chain has %d reachable tuples out of %d", len(index), n ** k)
    return LiftedChain(tuples, Q, n)


def kth_order_conditionals(model) -> Tuple[List[Tuple[int, ...]], np.ndarray]:
    """Every length-k context in lexicographic order with its next-state law."""
    n, k = len(model.vocab), model.w.k
    if n ** (k + 1) > CONDITIONAL_ENTRY_LIMIT:
        raise SizeGuardError(f"conditional table needs n^(k+1) <= {CONDITIONAL_ENTRY_LIMIT}")
    contexts = list(itertools.product(range(n), repeat=k))
    table = np.vstack([transition_distribution(model, ctx) for ctx in contexts])
    return contexts, table
