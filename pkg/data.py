"""Corpus ingestion, preprocessing and train/test splitting.

A corpus file is UTF-8 text with one sequence per line and tokens separated
by ASCII whitespace.  Preprocessing collapses consecutive repeats, replaces
tokens that are rare in the original corpus by a single rare token, collapses
again and drops sequences left with nothing to score.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigError, DataError, VocabularyError
from lamp import Corpus, Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_RARE_TOKEN = "<RARE>"
_ASCII_WHITESPACE = re.compile(r"[ \t\r\f\v]+")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PreprocessConfig:
    collapse_repeats: bool = True
    rare_min_count: int = 10
    rare_token_label: str = DEFAULT_RARE_TOKEN
    split_fraction: float = 0.9
    split_seed: int = 0

    def __post_init__(self):
        if self.rare_min_count < 0:
            raise ConfigError(f"rare_min_count must be >= 0, got {self.rare_min_count}")
        if not 0 < self.split_fraction < 1:
            raise ConfigError(f"split_fraction must lie strictly between 0 and 1, got {self.split_fraction}")
        if not self.rare_token_label or _ASCII_WHITESPACE.search(self.rare_token_label):
            raise ConfigError(f"rare token label {self.rare_token_label!r} must be a single token")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Dict) -> "PreprocessConfig":
        return cls(**doc)


def tokenize(line: str) -> List[str]:
    return [tok for tok in _ASCII_WHITESPACE.split(line.strip(" \t\r\f\v")) if tok]


def load_corpus(path: PathLike, limit: Optional[int] = None) -> Corpus:
    """Read a corpus file; blank lines are skipped, ``limit`` caps the sequence count."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus file {path} is not valid UTF-8: {exc}") from exc

    sequences: List[List[str]] = []
    blank = 0
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    for line in lines:
        tokens = tokenize(line)
        if not tokens:
            blank += 1
            continue
        if limit is not None and len(sequences) >= limit:
            logger.info("stopped after %d sequences (limit)", limit)
            break
        sequences.append(tokens)
    if blank > 0:
        logger.warning("skipped %d blank lines in %s", blank, path)
    if not sequences:
        raise DataError(f"corpus file {path} holds no nonempty lines")
    counts = Counter(tok for seq in sequences for tok in seq)
    return Corpus.from_tokens(sequences, original_counts=dict(counts))


def _original_counts(corpus: Corpus) -> Dict[str, int]:
    if corpus.original_counts is not None:
        return dict(corpus.original_counts)
    return dict(Counter(tok for seq in corpus.token_sequences() for tok in seq))


def collapse_repeats(corpus: Corpus) -> Corpus:
    """Replace every run of equal adjacent states by one state."""
    collapsed = []
    for seq in corpus.sequences:
        keep = np.ones(seq.size, dtype=bool)
        keep[1:] = seq[1:] != seq[:-1]
        collapsed.append(seq[keep])
    return Corpus(corpus.vocab, tuple(collapsed), corpus.original_counts)


def apply_rare_threshold(corpus: Corpus, min_count: int,
                         rare_label: str = DEFAULT_RARE_TOKEN) -> Corpus:
    """Map tokens seen fewer than ``min_count`` times in the original corpus to ``rare_label``.

    The vocabulary is rebuilt densely in first-appearance order.
    """
    if min_count < 0:
        raise ConfigError(f"min_count must be >= 0, got {min_count}")
    if min_count == 0:
        return corpus
    counts = _original_counts(corpus)
    rare = {tok for tok in corpus.vocab.tokens if counts.get(tok, 0) < min_count and tok != rare_label}
    if not rare:
        return corpus
    logger.info("replacing %d rare token types by %s", len(rare), rare_label)
    mapped = [[rare_label if tok in rare else tok for tok in seq] for seq in corpus.token_sequences()]
    vocab = Vocabulary.from_sequences(mapped, rare_token=rare_label)
    return Corpus.from_tokens(mapped, vocab, original_counts=counts)


@dataclass(frozen=True)
class PreprocessReport:
    sequences_in: int
    sequences_out: int
    dropped_short: int
    tokens_in: int
    tokens_out: int
    vocab_in: int
    vocab_out: int

    def to_dict(self) -> Dict:
        return asdict(self)


def preprocess(corpus: Corpus, cfg: PreprocessConfig) -> Tuple[Corpus, PreprocessReport]:
    """Collapse, replace rare tokens, collapse again, drop length-1 sequences."""
    counts = _original_counts(corpus)
    out = Corpus(corpus.vocab, corpus.sequences, counts)
    if cfg.collapse_repeats:
        out = collapse_repeats(out)
    out = apply_rare_threshold(out, cfg.rare_min_count, cfg.rare_token_label)
    if cfg.collapse_repeats:
        out = collapse_repeats(out)
    kept = tuple(seq for seq in out.sequences if seq.size > 1)
    dropped = len(out.sequences) - len(kept)
    if dropped:
        logger.warning("dropped %d sequences of length 1 after preprocessing", dropped)
    if not kept:
        raise DataError("preprocessing left no sequence with a transition to score")
    tokens = [out.vocab.decode(seq) for seq in kept]
    vocab = Vocabulary.from_sequences(tokens, rare_token=out.vocab.rare_token)
    result = Corpus.from_tokens(tokens, vocab, original_counts=counts)
    report = PreprocessReport(
        sequences_in=len(corpus), sequences_out=len(result), dropped_short=dropped,
        tokens_in=corpus.total_tokens, tokens_out=result.total_tokens,
        vocab_in=len(corpus.vocab), vocab_out=len(result.vocab),
    )
    return result, report


def reencode(corpus: Corpus, vocab: Vocabulary) -> Corpus:
    """Map ``corpus`` onto ``vocab``; unknown tokens go to the rare token."""
    if corpus.vocab == vocab:
        return corpus
    tokens = corpus.token_sequences()
    unknown = {tok for seq in tokens for tok in seq if tok not in vocab}
    if unknown and vocab.rare_token is None:
        raise VocabularyError(f"{len(unknown)} tokens are not in the vocabulary and it has no rare token")
    return Corpus.from_tokens(tokens, vocab, map_unknown=True, original_counts=corpus.original_counts)


def _train_test(corpus: Corpus, train_ids: Sequence[int], test_ids: Sequence[int],
                rare_label: str) -> Tuple[Corpus, Corpus]:
    all_tokens = corpus.token_sequences()
    train_tokens = [all_tokens[i] for i in train_ids]
    test_tokens = [all_tokens[i] for i in test_ids]
    seen = {tok for seq in train_tokens for tok in seq}
    unseen = {tok for seq in test_tokens for tok in seq} - seen
    rare = corpus.vocab.rare_token
    if unseen and rare is None:
        rare = rare_label
    vocab = Vocabulary.from_sequences(train_tokens, rare_token=rare)
    if unseen:
        logger.info("%d test-only token types mapped to %s", len(unseen), vocab.rare_token)
    train = Corpus.from_tokens(train_tokens, vocab, original_counts=corpus.original_counts)
    test = Corpus.from_tokens(test_tokens, vocab, map_unknown=True, original_counts=corpus.original_counts)
    return train, test


def split(corpus: Corpus, fraction: float, seed: Optional[int] = None,
          rare_label: str = DEFAULT_RARE_TOKEN) -> Tuple[Corpus, Corpus]:
    """Whole-sequence train/test split sharing the train-side vocabulary."""
    if len(corpus) < 2:
        raise DataError("splitting needs at least 2 sequences")
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_train = min(max(int(round(fraction * len(corpus))), 1), len(corpus) - 1)
    return _train_test(corpus, sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist()), rare_label)


def kfold(corpus: Corpus, folds: int, seed: Optional[int] = None,
          rare_label: str = DEFAULT_RARE_TOKEN) -> List[Tuple[Corpus, Corpus]]:
    """``folds`` train/test pairs whose test sides partition the sequences."""
    if not 2 <= folds <= len(corpus):
        raise ConfigError(f"need 2 <= folds <= {len(corpus)} sequences, got {folds}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    parts = np.array_split(order, folds)
    pairs = []
    for i, test_ids in enumerate(parts):
        train_ids = np.concatenate([p for j, p in enumerate(parts) if j != i])
        pairs.append(_train_test(corpus, sorted(train_ids.tolist()), sorted(test_ids.tolist()), rare_label))
    return pairs


def save_corpus_cache(corpus: Corpus, path: PathLike):
    Path(path).write_text(json.dumps(corpus.to_dict()), encoding="utf-8")


def load_corpus_cache(path: PathLike) -> Corpus:
    try:
        return Corpus.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"cannot read corpus cache {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corpus cache {path} is not valid JSON: {exc}") from exc


def read_corpus(path: PathLike, limit: Optional[int] = None) -> Corpus:
    """Load either a cached JSON corpus or a plain text corpus."""
    if str(path).endswith(".json"):
        corpus = load_corpus_cache(path)
        return corpus if limit is None else corpus.subset(range(min(limit, len(corpus))))
    return load_corpus(path, limit)


def token_frequencies(corpus: Corpus) -> pd.DataFrame:
    counts = np.zeros(len(corpus.vocab), dtype=np.int64)
    for seq in corpus.sequences:
        counts += np.bincount(seq, minlength=len(corpus.vocab))
    original = corpus.original_counts or {}
    frame = pd.DataFrame({
        "token": list(corpus.vocab.tokens),
        "count": counts,
        "original_count": [int(original.get(tok, 0)) for tok in corpus.vocab.tokens],
    })
    return frame.sort_values(["count", "token"], ascending=[False, True], kind="mergesort").reset_index(drop=True)
