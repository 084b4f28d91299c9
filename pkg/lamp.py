"""Linear additive Markov processes (LAMP): model types and exact semantics.

A LAMP over ``n`` states is a pair ``(w, P)``: ``w`` is a distribution over
history lags ``1..k`` and ``P`` a row-stochastic matrix.  The next state is
drawn by picking a lag ``i ~ w``, looking ``i`` steps back (clamped to the
first state of the sequence) and stepping once with ``P``:

    Pr[x_t | x_0..x_{t-1}] = sum_i w_i * P(x_{max(0, t-i)}, x_t)

Scoring starts at position 1 of every sequence and history never crosses a
sequence boundary.  All likelihood arithmetic is in natural logs; perplexity
converts to base 2 at the end.

The evaluation and sampling helpers work on any model exposing ``w``,
``vocab`` and ``lag_matrices()`` (one matrix per lag), so generalized models
share the exact same code path.
"""
from __future__ import annotations

import bisect
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from errors import DataError, EmptyRowError, InvalidStateError, VocabularyError

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

ROW_SUM_TOL = 1e-9
WEIGHT_SUM_TOL = 1e-12
# sequences per scoring chunk; fixed so results do not depend on thread count
CHUNK_SIZE = 512

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Vocabulary:
    """Dense token <-> state id mapping."""

    tokens: Tuple[str, ...]
    rare_token: Optional[str] = None
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(str(t) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)
        index = {}
        for i, token in enumerate(tokens):
            if token in index:
                raise VocabularyError(f"duplicate token {token!r} in vocabulary")
            index[token] = i
        if self.rare_token is not None and self.rare_token not in index:
            raise VocabularyError(f"rare token {self.rare_token!r} is not in the vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def rare_id(self) -> Optional[int]:
        return None if self.rare_token is None else self.index[self.rare_token]

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str], map_unknown: bool = False) -> List[int]:
        """Token strings to ids; unknown tokens go to the rare token when allowed."""
        rare = self.rare_id
        out = []
        for token in tokens:
            state = self.index.get(token)
            if state is None:
                if not map_unknown or rare is None:
                    raise VocabularyError(f"unknown token {token!r}")
                state = rare
            out.append(state)
        return out

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]

    @classmethod
    def from_sequences(cls, token_sequences: Iterable[Sequence[str]],
                       rare_token: Optional[str] = None) -> "Vocabulary":
        """Build a vocabulary in first-appearance order."""
        seen = {}
        for seq in token_sequences:
            for token in seq:
                if token not in seen:
                    seen[token] = len(seen)
        if rare_token is not None and rare_token not in seen:
            seen[rare_token] = len(seen)
        return cls(tuple(seen), rare_token)

    def to_dict(self) -> Dict:
        return {"tokens": list(self.tokens), "rare_token": self.rare_token}


@dataclass(frozen=True, eq=False)
class HistoryDistribution:
    """Distribution ``w`` over lags 1..k with its first two moments."""

    weights: np.ndarray
    mean: float = field(init=False)
    variance: float = field(init=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if w.size < 1:
            raise DataError("history distribution needs at least one lag")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError(f"history weights must be finite and nonnegative, got {w.tolist()}")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise DataError(f"history weights sum to {w.sum()!r}, expected 1")
        w.setflags(write=False)
        lags = np.arange(1, w.size + 1, dtype=np.float64)
        mean = float(np.dot(lags, w))
        variance = max(0.0, float(np.dot(lags * lags, w)) - mean * mean)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def k(self) -> int:
        return int(self.weights.size)

    @classmethod
    def normalized(cls, values: Sequence[float]) -> "HistoryDistribution":
        v = np.asarray(values, dtype=np.float64)
        total = v.sum()
        if not total > 0:
            raise DataError("history weights must have positive total mass")
        return cls(v / total)

    @classmethod
    def geometric(cls, k: int, decay: float) -> "HistoryDistribution":
        """``w_i`` proportional to ``decay**i``."""
        return cls.normalized(decay ** np.arange(1, k + 1, dtype=np.float64))

    @classmethod
    def first_order(cls, k: int = 1) -> "HistoryDistribution":
        w = np.zeros(k)
        w[0] = 1.0
        return cls(w)

    @classmethod
    def parse(cls, text: str) -> "HistoryDistribution":
        """Parse a comma separated list such as ``"0.5,0.5"`` (normalized)."""
        try:
            values = [float(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise DataError(f"cannot parse history weights {text!r}") from None
        return cls.normalized(values)


class SparseStochasticMatrix:
    """Row-stochastic matrix with explicit sparse support (canonical CSR).

    Stored entries form the support; an entry may hold probability 0 and still
    belong to the support.  Rows with no stored entries are allowed in the
    object but are invalid wherever a transition out of them is needed.
    """

    def __init__(self, n: int, indptr, indices, data, validate: bool = True):
        self._csr = sparse.csr_matrix(
            (np.asarray(data, dtype=np.float64),
             np.asarray(indices, dtype=np.int64),
             np.asarray(indptr, dtype=np.int64)),
            shape=(n, n),
        )
        self.n = int(n)
        self._keys = None
        self._cumulative = None
        if validate:
            self._validate()
        for arr in (self._csr.data, self._csr.indices, self._csr.indptr):
            arr.setflags(write=False)

    def _validate(self):
        n, indptr, indices, data = self.n, self.indptr, self.indices, self.data
        if indptr.size != n + 1 or indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise DataError("malformed row pointer array")
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise InvalidStateError(f"column id out of range for n={n}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise DataError("transition probabilities must be finite and nonnegative")
        row_ids = np.repeat(np.arange(n), np.diff(indptr))
        keys = row_ids * n + indices
        if keys.size > 1 and np.any(np.diff(keys) <= 0):
            raise DataError("duplicate or unsorted columns within a row")
        sums = np.add.reduceat(data, indptr[:-1]) if data.size else np.zeros(n)
        nonempty = np.diff(indptr) > 0
        bad = nonempty & (np.abs(sums - 1.0) > ROW_SUM_TOL)
        if np.any(bad):
            x = int(np.flatnonzero(bad)[0])
            raise DataError(f"row {x} sums to {sums[x]!r}, expected 1")

    # construction -----------------------------------------------------

    @classmethod
    def from_triples(cls, n: int, rows, cols, values, validate: bool = True) -> "SparseStochasticMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
            raise InvalidStateError(f"state id out of range for n={n}")
        keys = rows * n + cols
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if keys.size > 1 and np.any(np.diff(keys) == 0):
            raise DataError("duplicate (row, column) entry in transition matrix")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(n, indptr, cols[order], values[order], validate=validate)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[Tuple[int, float]]]) -> "SparseStochasticMatrix":
        r, c, v = [], [], []
        for x, row in enumerate(rows):
            for y, p in row:
                r.append(x)
                c.append(y)
                v.append(p)
        return cls.from_triples(len(rows), r, c, v)

    @classmethod
    def from_dense(cls, matrix, keep_zeros: bool = False) -> "SparseStochasticMatrix":
        """From a dense array; zero entries are dropped unless ``keep_zeros``."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError(f"transition matrix must be square, got shape {m.shape}")
        if keep_zeros:
            rows, cols = np.indices(m.shape)
            rows, cols = rows.ravel(), cols.ravel()
        else:
            rows, cols = np.nonzero(m)
        return cls.from_triples(m.shape[0], rows, cols, m[rows, cols])

    @classmethod
    def from_scipy(cls, matrix) -> "SparseStochasticMatrix":
        csr = sparse.csr_matrix(matrix, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.indptr, csr.indices, csr.data)

    def with_values(self, data, validate: bool = True) -> "SparseStochasticMatrix":
        """Same support, new values (aligned with :attr:`data`)."""
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise DataError("value array does not match the matrix support")
        return SparseStochasticMatrix(self.n, self.indptr, self.indices, data, validate=validate)

    # access -------------------------------------------------------------

    @property
    def indptr(self) -> np.ndarray:
        return self._csr.indptr

    @property
    def indices(self) -> np.ndarray:
        return self._csr.indices

    @property
    def data(self) -> np.ndarray:
        return self._csr.data

    @property
    def support_size(self) -> int:
        return int(self._csr.data.size)

    nnz = support_size

    def to_scipy(self) -> sparse.csr_matrix:
        return self._csr.copy()

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def row(self, x: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[x], self.indptr[x + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def row_slice(self, x: int) -> slice:
        return slice(int(self.indptr[x]), int(self.indptr[x + 1]))

    def row_sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(self.row_sizes() == 0)

    def row_ids(self) -> np.ndarray:
        """Row id of every stored entry."""
        return np.repeat(np.arange(self.n, dtype=np.int64), self.row_sizes())

    def keys(self) -> np.ndarray:
        if self._keys is None:
            keys = self.row_ids() * self.n + self.indices
            keys.setflags(write=False)
            self._keys = keys
        return self._keys

    def find(self, rows, cols) -> np.ndarray:
        """Entry index of each ``(row, col)`` pair, -1 where off the support."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        query = rows * self.n + cols
        keys = self.keys()
        if keys.size == 0:
            return np.full(query.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, query), keys.size - 1)
        return np.where(keys[pos] == query, pos, -1)

    def get(self, x: int, y: int) -> float:
        e = int(self.find(x, y))
        return 0.0 if e < 0 else float(self.data[e])

    def triples(self) -> List[List]:
        return [[int(r), int(c), float(p)] for r, c, p in zip(self.row_ids(), self.indices, self.data)]

    def sampling_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-row cumulative probabilities normalized to end at exactly 1.

        Returns ``(cumulative, keys)`` where ``keys = row + cumulative`` is
        globally sorted, which lets many rows be sampled with one search.
        """
        if self._cumulative is None:
            cum = np.cumsum(self.data)
            sizes = self.row_sizes()
            before = np.concatenate(([0.0], cum))[self.indptr[:-1]]
            within = cum - np.repeat(before, sizes)
            last = self.indptr[1:][sizes > 0] - 1
            totals = np.zeros(self.n)
            totals[sizes > 0] = within[last]
            totals = np.repeat(totals, sizes)
            within = np.divide(within, totals, out=np.ones_like(within), where=totals > 0)
            within[last] = 1.0
            keys = self.row_ids() + within
            within.setflags(write=False)
            keys.setflags(write=False)
            self._cumulative = (within, keys)
        return self._cumulative

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseStochasticMatrix):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self) -> str:
        return f"SparseStochasticMatrix(n={self.n}, nnz={self.support_size})"


@dataclass(frozen=True, eq=False)
class LampModel:
    w: HistoryDistribution
    P: SparseStochasticMatrix
    vocab: Vocabulary

    def __post_init__(self):
        if self.P.n != len(self.vocab):
            raise DataError(f"matrix has {self.P.n} states but vocabulary has {len(self.vocab)}")

    @property
    def k(self) -> int:
        return self.w.k

    @property
    def n(self) -> int:
        return self.P.n

    @property
    def num_parameters(self) -> int:
        return self.P.support_size + self.k

    def lag_matrices(self) -> List[SparseStochasticMatrix]:
        return [self.P] * self.k

    def replace(self, w: Optional[HistoryDistribution] = None,
                P: Optional[SparseStochasticMatrix] = None) -> "LampModel":
        return LampModel(self.w if w is None else w, self.P if P is None else P, self.vocab)

    def to_dict(self) -> Dict:
        return {
            "k": self.k,
            "w": [float(v) for v in self.w.weights],
            "n": self.n,
            "vocab": list(self.vocab.tokens),
            "rare_token": self.vocab.rare_token,
            "matrix": self.P.triples(),
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> "LampModel":
        try:
            vocab = Vocabulary(tuple(doc["vocab"]), doc.get("rare_token"))
            w = HistoryDistribution(doc["w"])
            n = int(doc["n"])
            triples = np.asarray(doc["matrix"], dtype=np.float64).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed model document: {exc}") from exc
        if int(doc.get("k", w.k)) != w.k:
            raise DataError(f"model declares k={doc['k']} but has {w.k} weights")
        P = SparseStochasticMatrix.from_triples(
            n, triples[:, 0].astype(np.int64), triples[:, 1].astype(np.int64), triples[:, 2])
        return cls(w, P, vocab)


@dataclass(frozen=True, eq=False)
class Corpus:
    """Integer-encoded sequences over a shared vocabulary."""

    vocab: Vocabulary
    sequences: Tuple[np.ndarray, ...]
    # token counts of the raw corpus, carried through preprocessing
    original_counts: Optional[Dict[str, int]] = None

    def __post_init__(self):
        n = len(self.vocab)
        seqs = []
        for s, seq in enumerate(self.sequences):
            arr = np.array(seq, dtype=np.int64).ravel()
            if arr.size == 0:
                raise DataError(f"sequence {s} is empty")
            if arr.min() < 0 or arr.max() >= n:
                raise InvalidStateError(f"sequence {s} holds a state id outside 0..{n - 1}")
            arr.setflags(write=False)
            seqs.append(arr)
        object.__setattr__(self, "sequences", tuple(seqs))

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def total_transitions(self) -> int:
        return sum(len(seq) - 1 for seq in self.sequences)

    @property
    def total_tokens(self) -> int:
        return sum(len(seq) for seq in self.sequences)

    def token_sequences(self) -> List[List[str]]:
        return [self.vocab.decode(seq) for seq in self.sequences]

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return Corpus(self.vocab, tuple(self.sequences[i] for i in indices), self.original_counts)

    @classmethod
    def from_tokens(cls, token_sequences: Sequence[Sequence[str]],
                    vocab: Optional[Vocabulary] = None,
                    map_unknown: bool = False,
                    original_counts: Optional[Dict[str, int]] = None) -> "Corpus":
        token_sequences = [list(seq) for seq in token_sequences]
        if vocab is None:
            vocab = Vocabulary.from_sequences(token_sequences)
        seqs = tuple(vocab.encode(seq, map_unknown=map_unknown) for seq in token_sequences)
        return cls(vocab, seqs, original_counts)

    def to_dict(self) -> Dict:
        doc = {"vocab": self.vocab.to_dict(),
               "sequences": [seq.tolist() for seq in self.sequences]}
        if self.original_counts is not None:
            doc["original_counts"] = dict(self.original_counts)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict) -> "Corpus":
        try:
            vocab = Vocabulary(tuple(doc["vocab"]["tokens"]), doc["vocab"].get("rare_token"))
            return cls(vocab, tuple(doc["sequences"]), doc.get("original_counts"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed corpus document: {exc}") from exc


def _clamped_sources(seq: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    j = np.arange(1, seq.size)
    lags = np.arange(1, k + 1)
    back = np.maximum(0, j[:, None] - lags[None, :])
    return seq[back], seq[1:]


@dataclass(frozen=True, eq=False)
class ScoringTable:
    """Clamped lag sources and targets for every scored position of a corpus.

    Row ``t`` describes one scored position: ``sources[t, i]`` is the state
    ``i + 1`` steps back (clamped to the sequence start) and ``targets[t]``
    the observed next state.
    """

    k: int
    sources: np.ndarray
    targets: np.ndarray
    sequence_ids: np.ndarray
    positions: np.ndarray
    num_sequences: int

    @property
    def size(self) -> int:
        return int(self.targets.size)

    @classmethod
    def build(cls, corpus: Corpus, k: int, threads: int = 1) -> "ScoringTable":
        if k < 1:
            raise DataError(f"lag support must be >= 1, got {k}")
        seqs = corpus.sequences
        chunks = [range(lo, min(lo + CHUNK_SIZE, len(seqs))) for lo in range(0, len(seqs), CHUNK_SIZE)]

        def build_chunk(ids):
            src, dst, sid, pos = [], [], [], []
            for s in ids:
                seq = seqs[s]
                a, b = _clamped_sources(seq, k)
                src.append(a)
                dst.append(b)
                sid.append(np.full(b.size, s, dtype=np.int64))
                pos.append(np.arange(1, seq.size, dtype=np.int64))
            return src, dst, sid, pos

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(build_chunk, chunks))
        else:
            parts = [build_chunk(ids) for ids in chunks]

        src = [a for part in parts for a in part[0]]
        dst = [a for part in parts for a in part[1]]
        sid = [a for part in parts for a in part[2]]
        pos = [a for part in parts for a in part[3]]
        if src:
            sources = np.concatenate(src).reshape(-1, k)
            targets, sequence_ids, positions = np.concatenate(dst), np.concatenate(sid), np.concatenate(pos)
        else:
            sources = np.zeros((0, k), dtype=np.int64)
            targets = sequence_ids = positions = np.zeros(0, dtype=np.int64)
        for arr in (sources, targets, sequence_ids, positions):
            arr.setflags(write=False)
        return cls(k, sources, targets, sequence_ids, positions, len(seqs))

    def lag_edges(self, lag_matrices: Sequence[SparseStochasticMatrix]) -> np.ndarray:
        """``(T, k)`` support index of each lag's entry, -1 where off-support."""
        if len(lag_matrices) != self.k:
            raise DataError(f"expected {self.k} lag matrices, got {len(lag_matrices)}")
        edges = np.empty(self.sources.shape, dtype=np.int64)
        distinct = {}
        for i, matrix in enumerate(lag_matrices):
            distinct.setdefault(id(matrix), []).append(i)
        for lags in distinct.values():
            matrix = lag_matrices[lags[0]]
            edges[:, lags] = matrix.find(self.sources[:, lags], self.targets[:, None])
        return edges

    def lag_probabilities(self, lag_matrices: Sequence[SparseStochasticMatrix],
                          edges: Optional[np.ndarray] = None) -> np.ndarray:
        """``(T, k)`` matrix of ``P^(lag)(source, target)`` values."""
        if edges is None:
            edges = self.lag_edges(lag_matrices)
        values = np.zeros(edges.shape, dtype=np.float64)
        for i, matrix in enumerate(lag_matrices):
            col = edges[:, i]
            hit = col >= 0
            values[hit, i] = matrix.data[col[hit]]
        return values

    def log_likelihood(self, weights: np.ndarray, values: np.ndarray) -> float:
        """Raw objective for arbitrary (even unnormalized) parameters."""
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log(values @ np.asarray(weights, dtype=np.float64))))


@dataclass(frozen=True, eq=False)
class LikelihoodResult:
    """Total and per-sequence log-likelihood (nats) of a corpus."""

    total: float
    per_sequence: np.ndarray
    transitions: int
    impossible: int

    @property
    def log2_total(self) -> float:
        return self.total / math.log(2.0)

    @property
    def perplexity(self) -> float:
        if self.transitions == 0:
            raise DataError("perplexity needs at least one scored transition")
        if self.impossible:
            return math.inf
        return 2.0 ** (-self.log2_total / self.transitions)


def check_vocabulary(model, corpus: Corpus):
    if model.vocab != corpus.vocab:
        raise VocabularyError(
            f"corpus vocabulary ({len(corpus.vocab)} tokens) does not match "
            f"the model vocabulary ({len(model.vocab)} tokens)")


def position_probabilities(model, table: ScoringTable) -> np.ndarray:
    """Model probability of every scored transition in ``table``."""
    values = table.lag_probabilities(model.lag_matrices())
    return values @ model.w.weights


def log_likelihood(model, corpus: Corpus, floor: Optional[float] = None,
                   table: Optional[ScoringTable] = None, threads: int = 1) -> LikelihoodResult:
    """Log-likelihood of ``corpus``; impossible transitions give ``-inf``.

    With ``floor`` every scored probability ``p`` is replaced by
    ``(p + floor) / (1 + n * floor)``.
    """
    check_vocabulary(model, corpus)
    if table is None or table.k != model.w.k:
        table = ScoringTable.build(corpus, model.w.k, threads=threads)
    probs = position_probabilities(model, table)
    if floor is not None:
        if floor <= 0:
            raise DataError(f"probability floor must be positive, got {floor}")
        probs = (probs + floor) / (1.0 + len(model.vocab) * floor)
    impossible = int(np.count_nonzero(probs <= 0))
    with np.errstate(divide="ignore"):
        logs = np.log(probs)
    per_sequence = np.zeros(len(corpus), dtype=np.float64)
    np.add.at(per_sequence, table.sequence_ids, logs)
    total = -math.inf if impossible else float(np.sum(logs))
    if impossible:
        logger.info("%d scored transitions have probability 0", impossible)
    return LikelihoodResult(total, per_sequence, table.size, impossible)


def perplexity(model, corpus: Corpus, floor: Optional[float] = None, threads: int = 1) -> float:
    if corpus.total_transitions == 0:
        raise DataError("perplexity needs at least one scored transition")
    return log_likelihood(model, corpus, floor=floor, threads=threads).perplexity


def _check_states(states: Iterable[int], n: int, what: str):
    for s in states:
        if not 0 <= int(s) < n:
            raise InvalidStateError(f"{what} holds state id {s} outside 0..{n - 1}")


def transition_distribution(model, history: Sequence[int]) -> np.ndarray:
    """Dense next-state distribution after ``history`` (oldest first)."""
    history = [int(s) for s in history]
    if not history:
        raise InvalidStateError("history must contain at least one state")
    n = len(model.vocab)
    _check_states(history, n, "history")
    t = len(history)
    out = np.zeros(n, dtype=np.float64)
    for i, (weight, matrix) in enumerate(zip(model.w.weights, model.lag_matrices()), start=1):
        if weight == 0:
            continue
        state = history[max(0, t - i)]
        cols, probs = matrix.row(state)
        if cols.size == 0:
            raise EmptyRowError(state, model.vocab.tokens[state])
        out[cols] += weight * probs
    return out


def _lag_cdf(weights: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def _draw_lags(rng: np.random.Generator, weights: np.ndarray, size) -> np.ndarray:
    cdf = _lag_cdf(weights)
    lags = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(lags, weights.size - 1) + 1


def generate(model, start: int, length: int, seed: Optional[int] = None) -> np.ndarray:
    """Sample one path of ``length`` states beginning with ``start``."""
    n = len(model.vocab)
    _check_states([start], n, "start")
    if length < 1:
        raise DataError(f"length must be >= 1, got {length}")
    rng = np.random.default_rng(seed)
    lags = _draw_lags(rng, model.w.weights, length - 1).tolist()
    uniforms = rng.random(length - 1).tolist()

    tables = {}
    lag_tables = []
    for matrix in model.lag_matrices():
        if id(matrix) not in tables:
            cumulative, _ = matrix.sampling_table()
            tables[id(matrix)] = (matrix.indptr.tolist(), matrix.indices.tolist(), cumulative.tolist())
        lag_tables.append(tables[id(matrix)])

    path = [int(start)]
    for t in range(1, length):
        lag = lags[t - 1]
        src = path[max(0, t - lag)]
        indptr, indices, cumulative = lag_tables[lag - 1]
        lo, hi = indptr[src], indptr[src + 1]
        if lo == hi:
            raise EmptyRowError(src, model.vocab.tokens[src])
        path.append(indices[bisect.bisect_right(cumulative, uniforms[t - 1], lo, hi - 1)])
    return np.asarray(path, dtype=np.int64)


def generate_many(model, start, length: int, runs: int, seed: Optional[int] = None) -> np.ndarray:
    """Sample ``runs`` independent paths at once; returns a ``runs x length`` array.

    ``start`` is a single state or one state per run.
    """
    n = len(model.vocab)
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64), (runs,))
    _check_states(np.unique(starts), n, "start")
    if length < 1 or runs < 1:
        raise DataError("length and runs must be >= 1")
    rng = np.random.default_rng(seed)
    lags = _draw_lags(rng, model.w.weights, (runs, length - 1))
    uniforms = rng.random((runs, length - 1))

    matrices = model.lag_matrices()
    groups = {}
    for i, matrix in enumerate(matrices, start=1):
        groups.setdefault(id(matrix), (matrix, []))[1].append(i)
    lag_group = np.zeros(len(matrices) + 1, dtype=np.int64)
    group_list = list(groups.values())
    for g, (_, lag_ids) in enumerate(group_list):
        lag_group[lag_ids] = g

    paths = np.empty((runs, length), dtype=np.int64)
    paths[:, 0] = starts
    rows = np.arange(runs)
    for t in range(1, length):
        lag = lags[:, t - 1]
        src = paths[rows, np.maximum(0, t - lag)]
        nxt = np.empty(runs, dtype=np.int64)
        which = lag_group[lag]
        for g, (matrix, _) in enumerate(group_list):
            mask = which == g
            if not mask.any():
                continue
            s = src[mask]
            lo, hi = matrix.indptr[s], matrix.indptr[s + 1]
            if np.any(lo == hi):
                bad = int(s[np.flatnonzero(lo == hi)[0]])
                raise EmptyRowError(bad, model.vocab.tokens[bad])
            _, keys = matrix.sampling_table()
            e = np.searchsorted(keys, s + uniforms[mask, t - 1], side="right")
            e = np.clip(e, lo, hi - 1)
            nxt[mask] = matrix.indices[e]
        paths[:, t] = nxt
    return paths


def save_model(model, path: PathLike):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path: PathLike):
    """Load a LAMP or GLAMP model document."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc
    if "matrices" in doc:
        from glamp import GlampModel
        return GlampModel.from_dict(doc)
    return LampModel.from_dict(doc)
