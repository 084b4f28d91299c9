"""Equilibrium and mixing behaviour of LAMP models.

Exact quantities for the underlying chain ``P`` (ergodicity, stationary
vector, mixing time), simulation of the exponent process that governs how
fast a LAMP advances through powers of ``P``, the Bernstein growth-rate
constant and the resulting mixing-time bound, plus Monte Carlo checks of all
of them.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse import csgraph

from errors import (
    ConfigError,
    ConvergenceError,
    NotErgodicError,
    SizeGuardError,
    VacuousBoundError,
)
from lamp import HistoryDistribution, LampModel, SparseStochasticMatrix, generate, generate_many

logger = logging.getLogger(__name__)

DENSE_STATE_LIMIT = 2000


def split_seeds(root: int, count: int) -> List[int]:
    """Independent per-trial seeds ``root ^ i``."""
    return [int(root) ^ i for i in range(count)]


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())


# ergodicity and stationarity ------------------------------------------------------

@dataclass(frozen=True)
class Ergodicity:
    ergodic: bool
    reason: str  # "ergodic", "reducible" or "periodic"
    period: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ergodic


def _support_graph(P: SparseStochasticMatrix) -> sparse.csr_matrix:
    graph = P.to_scipy()
    graph.data = (graph.data > 0).astype(np.float64)
    graph.eliminate_zeros()
    return graph


def is_ergodic(P: SparseStochasticMatrix) -> Ergodicity:
    """Irreducible (strongly connected support) and aperiodic (gcd of cycle lengths 1)."""
    graph = _support_graph(P)
    if np.any(np.diff(graph.indptr) == 0):
        return Ergodicity(False, "reducible")
    n_components, _ = csgraph.connected_components(graph, directed=True, connection="strong")
    if n_components > 1:
        return Ergodicity(False, "reducible")
    level = csgraph.shortest_path(graph, method="D", unweighted=True, indices=0).astype(np.int64)
    rows = np.repeat(np.arange(P.n), np.diff(graph.indptr))
    period = int(np.gcd.reduce(np.abs(level[rows] + 1 - level[graph.indices])))
    if period != 1:
        return Ergodicity(False, "periodic", period)
    return Ergodicity(True, "ergodic", 1)


def require_ergodic(P: SparseStochasticMatrix):
    check = is_ergodic(P)
    if not check:
        reason = check.reason if check.period is None else f"{check.reason} (period {check.period})"
        raise NotErgodicError(reason)


def stationary_distribution(P: SparseStochasticMatrix, tol: float = 1e-12,
                            max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration from the uniform vector until ``||pi P - pi||_1 <= tol``."""
    require_ergodic(P)
    transposed = P.to_scipy().T.tocsr()
    pi = np.full(P.n, 1.0 / P.n)
    for it in range(max_iter):
        nxt = transposed @ pi
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() <= tol:
            logger.debug("stationary distribution converged after %d iterations", it + 1)
            return nxt
        pi = nxt
    raise ConvergenceError(f"power iteration did not reach tolerance {tol} in {max_iter} iterations")


def worst_start_distance(P: SparseStochasticMatrix, t: int, pi: Optional[np.ndarray] = None) -> float:
    """``max_z TV(1_z P^t, pi)`` by dense powering."""
    if pi is None:
        pi = stationary_distribution(P)
    Pt = np.linalg.matrix_power(P.to_dense(), t)
    return float(0.5 * np.abs(Pt - pi).sum(axis=1).max())


def mixing_time(P: SparseStochasticMatrix, delta: float, max_states: int = DENSE_STATE_LIMIT,
                max_steps: int = 1_000_000) -> int:
    """Smallest ``t`` with worst-start TV to ``pi`` at most ``delta`` for every ``t' >= t``.

    Powers are taken densely.  After the first crossing the powering goes on
    until the distance falls below ``delta / 10`` or ``10 * n * t`` steps have
    been checked; a later excursion above ``delta`` moves the answer.
    """
    if delta >= 1:
        return 0
    if delta <= 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    if P.n > max_states:
        raise SizeGuardError(f"dense mixing time limited to {max_states} states, matrix has {P.n}")
    pi = stationary_distribution(P)
    M = P.to_dense()

    def distance(Pt):
        return float(0.5 * np.abs(Pt - pi).sum(axis=1).max())

    Pt = np.eye(P.n)
    t = 0
    d = distance(Pt)
    first = 0 if d <= delta else None
    while True:
        if first is not None and (d <= delta / 10 or t >= 10 * P.n * max(first, 1)):
            return first
        if t >= max_steps:
            raise ConvergenceError(f"mixing time exceeds the horizon of {max_steps} steps")
        Pt = Pt @ M
        t += 1
        d = distance(Pt)
        if d > delta:
            first = None
        elif first is None:
            first = t


# exponent process ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExponentTrace:
    t_max: int
    exponents: np.ndarray  # e_1 .. e_{t_max}
    seed: Optional[int]

    def at(self, t: int) -> int:
        return int(self.exponents[t - 1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": np.arange(1, self.t_max + 1), "e_t": self.exponents})

    def to_csv(self, path: Union[str, Path]):
        self.to_frame().to_csv(path, index=False)


def _draw_lags(rng: np.random.Generator, w: HistoryDistribution, size) -> np.ndarray:
    cdf = np.cumsum(w.weights)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), w.k - 1) + 1


def simulate_exponent_process(w: HistoryDistribution, t_max: int, seed: Optional[int] = None) -> ExponentTrace:
    """``e_t = e_{t - W_t} + 1`` with ``e_t = 0`` for ``t <= 0``.

    One uniform is drawn per step in order, so a longer horizon extends a
    trace without changing its prefix.
    """
    if t_max < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    lags = _draw_lags(np.random.default_rng(seed), w, t_max).tolist()
    e = [0] * (t_max + 1)
    for t in range(1, t_max + 1):
        e[t] = e[max(0, t - lags[t - 1])] + 1
    return ExponentTrace(t_max, np.asarray(e[1:], dtype=np.int64), seed)


def simulate_exponent_batch(w: HistoryDistribution, t_max: int, runs: int,
                            seed: Optional[int] = None) -> np.ndarray:
    """``runs x t_max`` array of independent exponent traces from one generator."""
    if t_max < 1 or runs < 1:
        raise ConfigError("t_max and runs must be >= 1")
    lags = _draw_lags(np.random.default_rng(seed), w, (runs, t_max))
    e = np.zeros((runs, t_max + 1), dtype=np.int64)
    rows = np.arange(runs)
    for t in range(1, t_max + 1):
        e[:, t] = e[rows, np.maximum(0, t - lags[:, t - 1])] + 1
    return e[:, 1:]


def exponent_traces(w: HistoryDistribution, t_max: int, runs: int, seed: int) -> List[ExponentTrace]:
    return [simulate_exponent_process(w, t_max, s) for s in split_seeds(seed, runs)]


@dataclass(frozen=True)
class RenewalEstimate:
    t: int
    exponent: int
    rate: float
    predicted: float
    clt_statistic: Optional[float]

    @property
    def clt_defined(self) -> bool:
        return self.clt_statistic is not None


def clt_statistic(exponent, t: int, w: HistoryDistribution):
    """Normalized deviation ``(e_t - t/mu) / (sigma mu^-1.5 sqrt(t))``; works on arrays."""
    mu, sigma = w.mean, math.sqrt(w.variance)
    if sigma == 0:
        return None
    return (np.asarray(exponent, dtype=np.float64) - t / mu) / (sigma * mu ** -1.5 * math.sqrt(t))


def renewal_rate_estimate(trace: ExponentTrace, w: HistoryDistribution) -> RenewalEstimate:
    t = trace.t_max
    e_t = trace.at(t)
    stat = clt_statistic(e_t, t, w)
    if stat is None:
        logger.info("history distribution has zero variance; CLT statistic undefined")
    return RenewalEstimate(t, e_t, e_t / t, 1.0 / w.mean, None if stat is None else float(stat))


# growth rate and mixing bound --------------------------------------------------------

def bernstein_constant(w: HistoryDistribution, epsilon: float) -> float:
    """Rate ``C`` in ``Pr[e_t < t / ((1 + eps) E[w])] <= exp(-C t)``.

    Bernstein's inequality applied to the centered lags ``W - E[w]``, which
    are bounded by ``k``.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    mean, var, k = w.mean, w.variance, w.k
    return epsilon ** 2 * mean / ((1 + epsilon) * (2 * var + (2.0 / 3.0) * k * epsilon * mean))


@dataclass(frozen=True)
class TailCheck:
    t: int
    epsilon: float
    empirical: float
    single_time_bound: float
    union_bound: float


def growth_tail_probability(w: HistoryDistribution, t: int, epsilon: float, runs: int,
                            seed: Optional[int] = None) -> TailCheck:
    """Monte Carlo ``Pr[e_t < t / ((1 + eps) E[w])]`` next to its Bernstein bounds."""
    C = bernstein_constant(w, epsilon)
    e_t = simulate_exponent_batch(w, t, runs, seed)[:, -1]
    empirical = float(np.mean(e_t < t / ((1 + epsilon) * w.mean)))
    return TailCheck(t, epsilon, empirical, math.exp(-C * t), math.exp(-C * t) / (1 - math.exp(-C)))


@dataclass(frozen=True)
class MixingBound:
    T: int
    epsilon: float
    delta: float
    bound: int
    confidence: float
    C: float
    chain_mixing_time: int

    @property
    def vacuous(self) -> bool:
        return self.confidence <= 0

    def to_dict(self) -> Dict:
        doc = asdict(self)
        doc["vacuous"] = self.vacuous
        return doc


def lamp_mixing_bound(w: HistoryDistribution, P: SparseStochasticMatrix, delta: float,
                      epsilon: float, T: int, strict: bool = False) -> MixingBound:
    """``max(T, ceil((1 + eps) E[w] t_mix(P, delta)))`` and the probability it holds.

    A non-positive confidence is returned as computed; with ``strict`` it
    raises :class:`VacuousBoundError` instead.
    """
    if T < 0:
        raise ConfigError(f"T must be >= 0, got {T}")
    t_mix = mixing_time(P, delta)
    C = bernstein_constant(w, epsilon)
    scaled = (1 + epsilon) * w.mean * t_mix
    bound = max(int(T), int(math.ceil(scaled - 1e-9)))
    confidence = 1.0 - math.exp(-C * T) / (1.0 - math.exp(-C))
    result = MixingBound(int(T), float(epsilon), float(delta), bound, confidence, C, t_mix)
    if result.vacuous:
        logger.warning("mixing bound at T=%d is vacuous (confidence %.6g)", T, confidence)
        if strict:
            raise VacuousBoundError(confidence, T)
    return result


# simulation checks -----------------------------------------------------------------

def driving_matrix(model) -> SparseStochasticMatrix:
    """The matrix whose ergodicity governs the model's equilibrium."""
    if isinstance(model, LampModel):
        return model.P
    from glamp import mixture_matrix
    return mixture_matrix(model)


def empirical_state_distribution(model, steps: int, burn_in: int = 0, seed: Optional[int] = None,
                                 start: int = 0, runs: Optional[int] = None) -> np.ndarray:
    """State occupancy after ``burn_in``.

    By default one trajectory of ``burn_in + steps`` states is used; with
    ``runs`` the ``steps`` visits are split over that many independent
    trajectories, each with its own burn-in.
    """
    require_ergodic(driving_matrix(model))
    n = len(model.vocab)
    if runs is None:
        path = generate(model, start, burn_in + steps, seed)[burn_in:]
        counts = np.bincount(path, minlength=n)
    else:
        per_run = max(1, -(-steps // runs))
        paths = generate_many(model, start, burn_in + per_run, runs, seed)[:, burn_in:]
        counts = np.bincount(paths.ravel(), minlength=n)
    return counts / counts.sum()


@dataclass(frozen=True, eq=False)
class DistanceEstimate:
    t: int
    runs: int
    per_start: np.ndarray
    slack: float

    @property
    def worst(self) -> float:
        return float(self.per_start.max())


def lamp_tv_at(model, t: int, runs: int, seed: int = 0) -> DistanceEstimate:
    """Worst-start TV between the law of ``X_t`` and ``pi``, estimated from ``runs`` paths per start.

    ``slack`` is three standard errors of the summed frequency estimates,
    halved like the TV distance itself.
    """
    pi = stationary_distribution(driving_matrix(model))
    n = len(model.vocab)
    per_start = np.empty(n)
    for z, s in enumerate(split_seeds(seed, n)):
        final = generate_many(model, z, t + 1, runs, s)[:, -1]
        per_start[z] = total_variation(np.bincount(final, minlength=n) / runs, pi)
    slack = 3.0 * float(np.sqrt(pi * (1 - pi) / runs).sum()) / 2.0
    return DistanceEstimate(t, runs, per_start, slack)


# reports ------------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class AnalysisReport:
    operation: str
    inputs: Dict = field(default_factory=dict)
    outputs: Dict = field(default_factory=dict)
    tolerances: Dict = field(default_factory=dict)
    passed: Optional[bool] = None

    def to_dict(self) -> Dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def stationary_report(P: SparseStochasticMatrix, tol: float = 1e-12, tokens: Optional[Sequence[str]] = None) -> AnalysisReport:
    pi = stationary_distribution(P, tol)
    residual = float(np.abs(P.to_scipy().T @ pi - pi).sum())
    outputs = {"pi": pi, "residual": residual}
    if tokens is not None:
        outputs["tokens"] = list(tokens)
    return AnalysisReport("stationary", {"n": P.n}, outputs, {"tol": tol}, residual <= tol)
