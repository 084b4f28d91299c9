"""N-gram reference models scored under the same protocol as LAMP.

Contexts are the last ``order`` states before a scored position, truncated
at the start of a sequence (no padding), so every model scores exactly the
same positions.  Counts for an ``m``-state context come from every position
with at least ``m`` states of history.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DataError
from lamp import Corpus, LikelihoodResult, SparseStochasticMatrix, Vocabulary, check_vocabulary

logger = logging.getLogger(__name__)

NAIVE = "none"
KNESER_NEY = "kneser_ney"

Context = Tuple[int, ...]
CountTable = Dict[Context, Dict[int, int]]


def count_ngrams(corpus: Corpus, order: int) -> List[CountTable]:
    """``counts[m][context][next]`` for context lengths ``m = 0..order``."""
    counts: List[CountTable] = [defaultdict(lambda: defaultdict(int)) for _ in range(order + 1)]
    for seq in corpus.sequences:
        seq = seq.tolist()
        for j in range(1, len(seq)):
            y = seq[j]
            counts[0][()][y] += 1
            for m in range(1, min(order, j) + 1):
                counts[m][tuple(seq[j - m:j])][y] += 1
    return [{ctx: dict(nexts) for ctx, nexts in level.items()} for level in counts]


def continuation_counts(counts: List[CountTable]) -> List[CountTable]:
    """``N1+(. ctx y)``: distinct one-state extensions of ``ctx`` seen before ``y``."""
    cont: List[CountTable] = []
    for m in range(len(counts) - 1):
        level: Dict[Context, Dict[int, int]] = defaultdict(lambda: defaultdict(int))
        for ctx, nexts in counts[m + 1].items():
            for y in nexts:
                level[ctx[1:]][y] += 1
        cont.append({ctx: dict(nexts) for ctx, nexts in level.items()})
    return cont


@dataclass(frozen=True, eq=False)
class NgramModel:
    order: int
    vocab: Vocabulary
    counts: List[CountTable]
    smoothing: str = NAIVE
    discount: float = 0.75
    continuation: List[CountTable] = field(init=False, repr=False)
    _scores: Dict[Tuple[Context, int], float] = field(init=False, repr=False, default_factory=dict)
    _lower_scores: Dict[Tuple[Context, int], float] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise ConfigError(f"n-gram order must be >= 1, got {self.order}")
        if self.smoothing not in (NAIVE, KNESER_NEY):
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")
        if self.smoothing == KNESER_NEY and not 0 < self.discount < 1:
            raise ConfigError(f"Kneser-Ney discount must lie in (0, 1), got {self.discount}")
        object.__setattr__(self, "continuation", continuation_counts(self.counts))

    @property
    def n(self) -> int:
        return len(self.vocab)

    @property
    def num_parameters(self) -> int:
        return sum(len(nexts) for level in self.counts[1:] for nexts in level.values())

    def _context(self, history: Sequence[int]) -> Context:
        history = tuple(int(s) for s in history)
        return history[max(0, len(history) - self.order):]

    def _dense(self, nexts: Dict[int, int]) -> np.ndarray:
        out = np.zeros(self.n)
        if nexts:
            out[list(nexts)] = list(nexts.values())
        return out

    def _discounted(self, nexts: Optional[Dict[int, int]], lower: np.ndarray) -> np.ndarray:
        if not nexts:
            return lower
        counts = self._dense(nexts)
        total = counts.sum()
        D = self.discount
        return np.maximum(counts - D, 0.0) / total + (D * len(nexts) / total) * lower

    def _base(self) -> np.ndarray:
        uniform = np.full(self.n, 1.0 / self.n)
        return self._discounted(self.continuation[0].get(()), uniform)

    def _lower(self, ctx: Context) -> np.ndarray:
        """Continuation distribution for a context below the top level."""
        if not ctx:
            return self._base()
        return self._discounted(self.continuation[len(ctx)].get(ctx), self._lower(ctx[1:]))

    def distribution(self, history: Sequence[int]) -> np.ndarray:
        """Next-state law after ``history`` (dense, over the vocabulary)."""
        ctx = self._context(history)
        nexts = self.counts[len(ctx)].get(ctx)
        if self.smoothing == NAIVE:
            out = self._dense(nexts or {})
            total = out.sum()
            return out / total if total > 0 else out
        lower = self._lower(ctx[1:]) if ctx else np.full(self.n, 1.0 / self.n)
        return self._discounted(nexts, lower)

    def _discounted_at(self, nexts: Optional[Dict[int, int]], y: int, lower: float) -> float:
        if not nexts:
            return lower
        total = sum(nexts.values())
        D = self.discount
        return max(nexts.get(y, 0) - D, 0.0) / total + (D * len(nexts) / total) * lower

    def _lower_at(self, ctx: Context, y: int) -> float:
        key = (ctx, y)
        if key not in self._lower_scores:
            lower = 1.0 / self.n if not ctx else self._lower_at(ctx[1:], y)
            self._lower_scores[key] = self._discounted_at(self.continuation[len(ctx)].get(ctx), y, lower)
        return self._lower_scores[key]

    def conditional(self, history: Sequence[int], y: int) -> float:
        """Probability of ``y`` after ``history``; memoized per (context, state)."""
        ctx, y = self._context(history), int(y)
        key = (ctx, y)
        if key in self._scores:
            return self._scores[key]
        nexts = self.counts[len(ctx)].get(ctx)
        if self.smoothing == NAIVE:
            p = nexts.get(y, 0) / sum(nexts.values()) if nexts else 0.0
        else:
            lower = self._lower_at(ctx[1:], y) if ctx else 1.0 / self.n
            p = self._discounted_at(nexts, y, lower)
        self._scores[key] = p
        return p

    def discounted_mass(self, history: Sequence[int]) -> float:
        """Mass removed from the seen continuations of the top-level context."""
        nexts = self.counts[len(self._context(history))].get(self._context(history))
        if not nexts:
            return 0.0
        total = sum(nexts.values())
        return sum(min(c, self.discount) for c in nexts.values()) / total

    def backoff_weight(self, history: Sequence[int]) -> float:
        """Weight given to the lower-order distribution at the top-level context."""
        nexts = self.counts[len(self._context(history))].get(self._context(history))
        if not nexts:
            return 1.0
        return self.discount * len(nexts) / sum(nexts.values())

    def to_transition_matrix(self) -> SparseStochasticMatrix:
        if self.order != 1:
            raise ConfigError("only order-1 models map onto a transition matrix")
        return SparseStochasticMatrix.from_dense(np.vstack([self.distribution([x]) for x in range(self.n)]))

    def to_dict(self) -> Dict:
        triples = [[list(ctx), int(y), int(c)]
                   for level in self.counts for ctx, nexts in sorted(level.items())
                   for y, c in sorted(nexts.items())]
        return {"order": self.order, "smoothing": self.smoothing, "discount": self.discount,
                "vocab": list(self.vocab.tokens), "rare_token": self.vocab.rare_token,
                "counts": triples}

    @classmethod
    def from_dict(cls, doc: Dict) -> "NgramModel":
        try:
            order = int(doc["order"])
            counts: List[CountTable] = [{} for _ in range(order + 1)]
            for ctx, y, c in doc["counts"]:
                counts[len(ctx)].setdefault(tuple(int(s) for s in ctx), {})[int(y)] = int(c)
            vocab = Vocabulary(tuple(doc["vocab"]), doc.get("rare_token"))
            return cls(order, vocab, counts, doc["smoothing"], float(doc["discount"]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"malformed n-gram document: {exc}") from exc


def fit_naive_ngram(corpus: Corpus, order: int) -> NgramModel:
    return NgramModel(order, corpus.vocab, count_ngrams(corpus, order), NAIVE)


def fit_kneser_ney(corpus: Corpus, order: int, discount: float = 0.75) -> NgramModel:
    return NgramModel(order, corpus.vocab, count_ngrams(corpus, order), KNESER_NEY, discount)


def ngram_log_likelihood(model: NgramModel, corpus: Corpus) -> LikelihoodResult:
    check_vocabulary(model, corpus)
    per_sequence = np.zeros(len(corpus))
    impossible = 0
    transitions = 0
    for s, seq in enumerate(corpus.sequences):
        seq = seq.tolist()
        total = 0.0
        for j in range(1, len(seq)):
            p = model.conditional(seq[max(0, j - model.order):j], seq[j])
            transitions += 1
            if p <= 0:
                impossible += 1
                total = -math.inf
            elif total != -math.inf:
                total += math.log(p)
        per_sequence[s] = total
    grand = -math.inf if impossible else float(per_sequence.sum())
    return LikelihoodResult(grand, per_sequence, transitions, impossible)


def ngram_perplexity(model: NgramModel, corpus: Corpus) -> float:
    if corpus.total_transitions == 0:
        raise DataError("perplexity needs at least one scored transition")
    return ngram_log_likelihood(model, corpus).perplexity


def save_ngram(model: NgramModel, path: Union[str, Path]):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_ngram(path: Union[str, Path]) -> NgramModel:
    try:
        return NgramModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"cannot read n-gram file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"n-gram file {path} is not valid JSON: {exc}") from exc
