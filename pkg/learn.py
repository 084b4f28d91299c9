"""Maximum-likelihood training of LAMP models.

The log-likelihood is concave in ``w`` for fixed ``P`` and in every single
row of ``P`` for fixed ``w`` and the other rows, so training alternates
between the ``w`` block and a sweep over the rows of ``P``.  Each block is a
simplex-constrained concave maximization solved by diagonal-Newton
trust-region steps whose subproblem is a water-filling problem: find the
level ``lambda`` at which the clipped Newton point sums to one.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np
import pandas as pd

from errors import ConfigError, DataError, EmptyRowError, NumericError, ZeroProbabilityError
from lamp import (
    Corpus,
    HistoryDistribution,
    LampModel,
    ScoringTable,
    SparseStochasticMatrix,
    check_vocabulary,
    log_likelihood,
)

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
MIN_TRUST_RADIUS = 1e-12
PRIOR_CLIP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    k: int = 3
    rounds: float = 1.5
    kkt_tol: float = 1e-6
    trust_init: float = 0.1
    trust_expand: float = 2.0
    trust_shrink: float = 0.5
    max_newton_iters: int = 100
    init_decay: float = 0.8
    support_epsilon: float = 1e-3
    weight_only: bool = False
    seed: int = 0
    prior: float = 0.0
    curvature_floor: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        twice = 2 * self.rounds
        if self.rounds < 0.5 or abs(twice - round(twice)) > 1e-9:
            raise ConfigError(f"rounds must be a positive multiple of 0.5, got {self.rounds}")
        for name in ("kkt_tol", "trust_init", "support_epsilon", "curvature_floor", "init_decay"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.trust_shrink < 1 < self.trust_expand:
            raise ConfigError("trust radius multipliers need 0 < trust_shrink < 1 < trust_expand")
        if self.max_newton_iters < 1:
            raise ConfigError("max_newton_iters must be >= 1")
        if self.prior < 0:
            raise ConfigError(f"prior must be >= 0, got {self.prior}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    @property
    def half_iterations(self) -> int:
        return int(round(2 * self.rounds))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


# empirical initialization ------------------------------------------------

def empirical_transition_matrix(corpus: Corpus, k: int, support_epsilon: float = 1e-3,
                                table: Optional[ScoringTable] = None) -> SparseStochasticMatrix:
    """Transition matrix whose support holds every pair seen at lags 1..k.

    Pairs seen at lag 1 get their bigram count ratio, the others
    ``support_epsilon``; rows are then renormalized.  States that never
    precede another state keep an empty row.
    """
    if len(corpus) == 0:
        raise DataError("cannot build a transition matrix from an empty corpus")
    n = len(corpus.vocab)
    if table is None or table.k != k:
        table = ScoringTable.build(corpus, k)
    src, dst = table.sources, table.targets
    support = np.unique((src * n + dst[:, None]).ravel())
    bigram = src[:, 0] * n + dst
    keys, counts = np.unique(bigram, return_counts=True)
    row_totals = np.bincount(src[:, 0], minlength=n).astype(np.float64)

    rows, cols = support // n, support % n
    values = np.full(support.size, float(support_epsilon))
    seen = np.searchsorted(support, keys)
    values[seen] = counts / row_totals[keys // n]
    sums = np.bincount(rows, weights=values, minlength=n)
    values = values / sums[rows]

    P = SparseStochasticMatrix.from_triples(n, rows, cols, values)
    empty = P.empty_rows()
    if empty.size:
        logger.warning("%d states have no outgoing transitions: %s", empty.size,
                       ", ".join(repr(corpus.vocab.tokens[x]) for x in empty[:10]))
    return P


def initial_model(corpus: Corpus, cfg: TrainConfig, table: Optional[ScoringTable] = None) -> LampModel:
    """Empirical ``P`` with geometric ``w_i ~ init_decay**i``."""
    P = empirical_transition_matrix(corpus, cfg.k, cfg.support_epsilon, table=table)
    return LampModel(HistoryDistribution.geometric(cfg.k, cfg.init_decay), P, corpus.vocab)


# gradients -----------------------------------------------------------------

def _table_for(model: LampModel, corpus: Corpus, table: Optional[ScoringTable]) -> ScoringTable:
    check_vocabulary(model, corpus)
    if table is None or table.k != model.k:
        table = ScoringTable.build(corpus, model.k)
    return table


def _require_positive(d: np.ndarray, table: ScoringTable):
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        t = int(bad[0])
        raise ZeroProbabilityError(int(table.sequence_ids[t]), int(table.positions[t]))


def _lag_terms(model: LampModel, table: ScoringTable):
    edges = table.lag_edges(model.lag_matrices())
    values = table.lag_probabilities(model.lag_matrices(), edges)
    d = values @ model.w.weights
    _require_positive(d, table)
    return edges, values, d


def grad_w(model: LampModel, corpus: Corpus, table: Optional[ScoringTable] = None) -> np.ndarray:
    table = _table_for(model, corpus, table)
    _, values, d = _lag_terms(model, table)
    return (values / d[:, None]).sum(axis=0)


def hessian_diag_w(model: LampModel, corpus: Corpus, table: Optional[ScoringTable] = None) -> np.ndarray:
    table = _table_for(model, corpus, table)
    _, values, d = _lag_terms(model, table)
    return -((values / d[:, None]) ** 2).sum(axis=0)


def _edge_coefficients(edges: np.ndarray, w: np.ndarray, nnz: int):
    """Sum of ``w_i`` over the lags of position ``t`` that hit support entry ``e``."""
    T, k = edges.shape
    flat_e = edges.ravel()
    hit = flat_e >= 0
    flat_t = np.repeat(np.arange(T, dtype=np.int64), k)[hit]
    flat_lag = np.tile(np.arange(k), T)[hit]
    pair_keys, inverse = np.unique(flat_t * nnz + flat_e[hit], return_inverse=True)
    coeff = np.bincount(inverse.ravel(), weights=w[flat_lag], minlength=pair_keys.size)
    return pair_keys // nnz, pair_keys % nnz, coeff


def grad_P(model: LampModel, corpus: Corpus, table: Optional[ScoringTable] = None) -> np.ndarray:
    """Gradient for every support entry of ``P``, aligned with ``model.P.data``."""
    table = _table_for(model, corpus, table)
    edges, _, d = _lag_terms(model, table)
    hit = edges >= 0
    per_lag = np.broadcast_to(model.w.weights[None, :] / d[:, None], edges.shape)
    return np.bincount(edges[hit], weights=per_lag[hit], minlength=model.P.support_size)


def hessian_diag_P(model: LampModel, corpus: Corpus, table: Optional[ScoringTable] = None) -> np.ndarray:
    table = _table_for(model, corpus, table)
    edges, _, d = _lag_terms(model, table)
    pair_t, pair_e, coeff = _edge_coefficients(edges, model.w.weights, model.P.support_size)
    return -np.bincount(pair_e, weights=(coeff / d[pair_t]) ** 2, minlength=model.P.support_size)


# simplex block solver -------------------------------------------------------

class BlockObjective(Protocol):
    def value(self, point: np.ndarray) -> float:
        ...

    def derivatives(self, point: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """Value, gradient and Hessian diagonal at ``point``."""
        ...


def _prior_terms(point: np.ndarray, prior: float):
    clipped = np.maximum(point, PRIOR_CLIP)
    with np.errstate(divide="ignore"):
        value = prior * float(np.sum(np.log(point)))
    return value, prior / clipped, -prior / clipped ** 2


class WeightObjective:
    """Log-likelihood as a function of ``w`` with ``P`` held fixed."""

    def __init__(self, values: np.ndarray, table: ScoringTable, prior: float = 0.0):
        self.values = values
        self.table = table
        self.prior = prior

    def value(self, point: np.ndarray) -> float:
        d = self.values @ point
        if np.any(d <= 0):
            return -math.inf
        total = float(np.sum(np.log(d)))
        if self.prior:
            total += _prior_terms(point, self.prior)[0]
        return total

    def derivatives(self, point: np.ndarray):
        d = self.values @ point
        _require_positive(d, self.table)
        ratio = self.values / d[:, None]
        value = float(np.sum(np.log(d)))
        grad = ratio.sum(axis=0)
        hess = -(ratio ** 2).sum(axis=0)
        if self.prior:
            pv, pg, ph = _prior_terms(point, self.prior)
            value, grad, hess = value + pv, grad + pg, hess + ph
        return value, grad, hess


class RowObjective:
    """Log-likelihood as a function of one row of ``P``.

    Every touched position ``t`` contributes ``log(base_t + coeff_t * p[j_t])``
    where ``j_t`` is the row entry matching the observed next state.
    """

    def __init__(self, base: np.ndarray, coeff: np.ndarray, local: np.ndarray, size: int,
                 prior: float = 0.0):
        self.base = base
        self.coeff = coeff
        self.local = local
        self.size = size
        self.prior = prior

    def value(self, point: np.ndarray) -> float:
        den = self.base + self.coeff * point[self.local]
        if np.any(den <= 0):
            return -math.inf
        total = float(np.sum(np.log(den)))
        if self.prior:
            total += _prior_terms(point, self.prior)[0]
        return total

    def derivatives(self, point: np.ndarray):
        den = self.base + self.coeff * point[self.local]
        if np.any(den <= 0):
            raise NumericError("row objective evaluated at a point with zero likelihood")
        ratio = self.coeff / den
        value = float(np.sum(np.log(den)))
        grad = np.bincount(self.local, weights=ratio, minlength=self.size)
        hess = -np.bincount(self.local, weights=ratio ** 2, minlength=self.size)
        if self.prior:
            pv, pg, ph = _prior_terms(point, self.prior)
            value, grad, hess = value + pv, grad + pg, hess + ph
        return value, grad, hess


def kkt_residual(point: np.ndarray, grad: np.ndarray) -> Tuple[float, float]:
    """Scaled KKT violation and the multiplier estimate ``lambda``.

    ``lambda`` is the mean gradient over the active set (``p > 0``).  Active
    coordinates should sit at ``lambda``, inactive ones at or below it.
    """
    active = point > 0
    lam = float(grad[active].mean())
    violation = float(np.max(np.abs(grad[active] - lam)))
    if not active.all():
        violation += max(0.0, float(np.max(grad[~active] - lam)))
    return violation / max(1.0, abs(lam)), lam


def water_fill_step(point: np.ndarray, grad: np.ndarray, curvature: np.ndarray,
                    radius: float) -> np.ndarray:
    """Maximize the diagonal quadratic model inside the trust box on the simplex.

    The maximizer is ``q(lam) = clip(p + (g - lam) / a, lo, hi)`` with the
    level ``lam`` chosen so that ``sum(q) == 1``.  ``sum(q)`` is piecewise
    linear and nonincreasing in ``lam``; the breakpoints are swept from the
    top down until the sum reaches one.
    """
    lo = np.maximum(0.0, point - radius)
    hi = np.minimum(1.0, point + radius)
    slope = 1.0 / curvature
    lam_lo = grad + curvature * (point - lo)  # at or above this level q == lo
    lam_hi = grad - curvature * (hi - point)  # at or below this level q == hi

    levels = np.concatenate([lam_lo, lam_hi])
    steps = np.concatenate([slope, -slope])
    order = np.argsort(-levels, kind="stable")
    levels, steps = levels[order], steps[order]

    slopes = np.cumsum(steps)
    sums = lo.sum() + np.concatenate(([0.0], np.cumsum(slopes[:-1] * (levels[:-1] - levels[1:]))))
    reached = np.flatnonzero(sums >= 1.0)
    if reached.size == 0:
        lam = levels[-1]
    elif reached[0] == 0:
        lam = levels[0]
    else:
        j = reached[0]
        lam = levels[j - 1] - (1.0 - sums[j - 1]) / slopes[j - 1]
    return np.clip(point + (grad - lam) * slope, lo, hi)


@dataclass
class BlockResult:
    point: np.ndarray
    value: float
    residual: float
    iterations: int
    accepted: int

    @property
    def active(self) -> int:
        return int(np.count_nonzero(self.point > 0))


def optimize_simplex_block(objective: BlockObjective, point: np.ndarray, cfg: TrainConfig,
                           on_step: Optional[Callable[[np.ndarray, float], None]] = None) -> BlockResult:
    """Trust-region diagonal-Newton ascent of a concave objective on the simplex.

    ``on_step(point, value)`` is called after every accepted step.
    """
    p = np.asarray(point, dtype=np.float64).copy()
    if p.size == 1:
        return BlockResult(np.ones(1), objective.value(np.ones(1)), 0.0, 0, 0)

    value, grad, hess = objective.derivatives(p)
    radius = cfg.trust_init
    accepted = 0
    residual = math.inf
    iterations = 0
    for iterations in range(cfg.max_newton_iters + 1):
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
            raise NumericError("non-finite gradient in simplex block")
        residual, _ = kkt_residual(p, grad)
        if residual <= cfg.kkt_tol or iterations == cfg.max_newton_iters:
            break
        curvature = np.maximum(np.abs(hess), cfg.curvature_floor)
        while True:
            q = np.maximum(water_fill_step(p, grad, curvature, radius), 0.0)
            q /= q.sum()
            candidate = objective.value(q)
            if math.isfinite(candidate) and candidate - value >= 0:
                break
            radius *= cfg.trust_shrink
            logger.debug("step rejected, trust radius now %.3g", radius)
            if radius < MIN_TRUST_RADIUS:
                break
        if radius < MIN_TRUST_RADIUS:
            logger.debug("trust radius collapsed at residual %.3g", residual)
            break
        p = q
        value, grad, hess = objective.derivatives(p)
        radius = min(1.0, radius * cfg.trust_expand)
        accepted += 1
        if on_step is not None:
            on_step(p, value)
    return BlockResult(p, value, residual, iterations, accepted)


def optimize_weights(model: LampModel, corpus: Corpus, cfg: TrainConfig,
                     table: Optional[ScoringTable] = None) -> Tuple[LampModel, BlockResult]:
    table = _table_for(model, corpus, table)
    values = table.lag_probabilities(model.lag_matrices())
    result = optimize_simplex_block(WeightObjective(values, table, cfg.prior), model.w.weights, cfg)
    return model.replace(w=HistoryDistribution(result.point)), result


class RowStatistics:
    """Which scored positions touch which support entry, fixed for one corpus and support."""

    def __init__(self, table: ScoringTable, P: SparseStochasticMatrix):
        self.table = table
        self.P = P
        k = table.k
        edges = table.lag_edges([P] * k)
        self.edges = edges
        T = table.size
        flat_e = edges.ravel()
        hit = flat_e >= 0
        flat_t = np.repeat(np.arange(T, dtype=np.int64), k)[hit]
        self.flat_lag = np.tile(np.arange(k), T)[hit]
        nnz = max(P.support_size, 1)
        pair_keys, inverse = np.unique(flat_t * nnz + flat_e[hit], return_inverse=True)
        pair_t, pair_e = pair_keys // nnz, pair_keys % nnz
        row = P.row_ids()[pair_e]
        order = np.argsort(row, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        self.inverse = rank[inverse.ravel()]
        self.pair_t = pair_t[order]
        self.pair_e = pair_e[order]
        self.row_ptr = np.zeros(P.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(row, minlength=P.n), out=self.row_ptr[1:])

    def coefficients(self, w: np.ndarray) -> np.ndarray:
        return np.bincount(self.inverse, weights=w[self.flat_lag], minlength=self.pair_t.size)


def optimize_row(model: LampModel, corpus: Corpus, state: int, cfg: TrainConfig,
                 table: Optional[ScoringTable] = None) -> Tuple[LampModel, BlockResult]:
    """Optimize ``P(state, .)`` with ``w`` and every other row fixed."""
    table = _table_for(model, corpus, table)
    stats = RowStatistics(table, model.P)
    values = table.lag_probabilities(model.lag_matrices(), stats.edges)
    d = values @ model.w.weights
    data = model.P.data.copy()
    result = _optimize_row_in_place(stats, stats.coefficients(model.w.weights), d, data, state, cfg)
    return model.replace(P=model.P.with_values(data)), result


def _optimize_row_in_place(stats: RowStatistics, coeff: np.ndarray, d: np.ndarray,
                           data: np.ndarray, state: int, cfg: TrainConfig) -> BlockResult:
    P = stats.P
    row = P.row_slice(state)
    size = row.stop - row.start
    if size == 0:
        raise EmptyRowError(state)
    current = data[row].copy()
    lo, hi = stats.row_ptr[state], stats.row_ptr[state + 1]
    if hi == lo:
        # never scored from this row; the likelihood does not depend on it
        return BlockResult(current, 0.0, 0.0, 0, 0)
    t = stats.pair_t[lo:hi]
    c = coeff[lo:hi]
    local = stats.pair_e[lo:hi] - row.start
    base = np.maximum(d[t] - c * current[local], 0.0)
    result = optimize_simplex_block(RowObjective(base, c, local, size, cfg.prior), current, cfg)
    d[t] += c * (result.point[local] - current[local])
    data[row] = result.point
    return result


# alternating minimization -------------------------------------------------------

@dataclass
class BlockRecord:
    half_iteration: int
    block: str
    log_likelihood: float
    perplexity: float
    kkt_residual: float
    active_set: int
    iterations: int
    accepted_steps: int
    wall_time: float = 0.0
    holdout_perplexity: Optional[float] = None

    def to_dict(self, timing: bool = False) -> Dict:
        doc = asdict(self)
        if not timing:
            doc.pop("wall_time")
        if doc["holdout_perplexity"] is None:
            doc.pop("holdout_perplexity")
        return doc


@dataclass
class TrainReport:
    config: TrainConfig
    records: List[BlockRecord] = field(default_factory=list)
    model: Optional[LampModel] = None

    @property
    def final_log_likelihood(self) -> float:
        return self.records[-1].log_likelihood

    @property
    def final_perplexity(self) -> float:
        return self.records[-1].perplexity

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.records)

    def to_frame(self, timing: bool = True) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict(timing=timing) for r in self.records])

    def to_json_lines(self) -> str:
        """One JSON record per half-iteration; timings are left out."""
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


def _perplexity_from(ll: float, transitions: int) -> float:
    if not math.isfinite(ll):
        return math.inf
    return 2.0 ** (-(ll / LN2) / transitions)


def alternate_minimize(corpus: Corpus, cfg: TrainConfig, holdout: Optional[Corpus] = None,
                       holdout_floor: Optional[float] = None) -> Tuple[LampModel, TrainReport]:
    """Fit ``(w, P)`` by alternating ``w`` and row-of-``P`` blocks, ``w`` first."""
    if corpus.total_transitions == 0:
        raise DataError("training corpus has no scored transitions")
    started = time.perf_counter()
    table = ScoringTable.build(corpus, cfg.k, threads=cfg.threads)
    model = initial_model(corpus, cfg, table=table)
    initial_P = model.P
    stats = RowStatistics(table, initial_P)
    values = table.lag_probabilities(model.lag_matrices(), stats.edges)
    report = TrainReport(cfg)
    T = table.size

    def record(h, block, ll, result, began):
        rec = BlockRecord(
            half_iteration=h, block=block, log_likelihood=ll,
            perplexity=_perplexity_from(ll, T),
            kkt_residual=result.residual if result else 0.0,
            active_set=result.active if result else int(np.count_nonzero(model.w.weights > 0)),
            iterations=result.iterations if result else 0,
            accepted_steps=result.accepted if result else 0,
            wall_time=time.perf_counter() - began,
        )
        if holdout is not None:
            rec.holdout_perplexity = log_likelihood(model, holdout, floor=holdout_floor).perplexity
        report.records.append(rec)
        logger.info("half-iteration %d (%s): log-likelihood %.6f, perplexity %.4f, residual %.2e",
                    h, block, rec.log_likelihood, rec.perplexity, rec.kkt_residual)

    ll = WeightObjective(values, table).value(model.w.weights)
    record(0, "init", ll, None, started)

    for h in range(1, cfg.half_iterations + 1):
        began = time.perf_counter()
        if h % 2 == 1:
            result = optimize_simplex_block(WeightObjective(values, table, cfg.prior), model.w.weights, cfg)
            model = model.replace(w=HistoryDistribution(result.point))
            ll = WeightObjective(values, table).value(model.w.weights)
            record(h, "w", ll, result, began)
            continue
        if cfg.weight_only:
            continue
        d = values @ model.w.weights
        _require_positive(d, table)
        coeff = stats.coefficients(model.w.weights)
        data = model.P.data.copy()
        residual, iterations, accepted = 0.0, 0, 0
        for x in range(model.n):
            if stats.row_ptr[x] == stats.row_ptr[x + 1]:
                continue
            result = _optimize_row_in_place(stats, coeff, d, data, x, cfg)
            residual = max(residual, result.residual)
            iterations += result.iterations
            accepted += result.accepted
        model = model.replace(P=model.P.with_values(data))
        values = table.lag_probabilities(model.lag_matrices(), stats.edges)
        ll = WeightObjective(values, table).value(model.w.weights)
        # active set of a P block counts nonzero entries over all rows
        record(h, "P", ll, BlockResult(data, ll, residual, iterations, accepted), began)

    report.model = model
    return model, report


@dataclass
class CrossValidation:
    fold_perplexities: np.ndarray
    reports: List[TrainReport]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_perplexities))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_perplexities))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fold": np.arange(len(self.fold_perplexities)),
                             "test_perplexity": self.fold_perplexities})


def cross_validate(corpus: Corpus, cfg: TrainConfig, folds: int = 10, seed: int = 0,
                   floor: Optional[float] = None) -> CrossValidation:
    """k-fold test perplexity of ``alternate_minimize`` under ``cfg``."""
    from data import kfold

    perplexities, reports = [], []
    for i, (train, test) in enumerate(kfold(corpus, folds, seed)):
        model, report = alternate_minimize(train, cfg)
        perplexities.append(log_likelihood(model, test, floor=floor).perplexity)
        reports.append(report)
        logger.info("fold %d/%d: test perplexity %.4f", i + 1, folds, perplexities[-1])
    return CrossValidation(np.asarray(perplexities), reports)
