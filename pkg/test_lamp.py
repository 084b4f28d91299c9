import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import DataError, EmptyRowError, InvalidStateError, VocabularyError
from lamp import (
    CHUNK_SIZE,
    Corpus,
    HistoryDistribution,
    LampModel,
    ScoringTable,
    SparseStochasticMatrix,
    Vocabulary,
    generate,
    generate_many,
    load_model,
    log_likelihood,
    perplexity,
    save_model,
    transition_distribution,
)


def test_short_history_clamps_every_lag_to_the_start(two_state_model):
    assert_allclose(transition_distribution(two_state_model, [0]), [0.9, 0.1])


def test_transition_mixes_rows_by_lag(two_state_model):
    assert_allclose(transition_distribution(two_state_model, [0, 1]), [0.48, 0.52])


def test_first_order_weights_use_last_state_row(two_state_matrix):
    model = LampModel(HistoryDistribution([1.0]), two_state_matrix, Vocabulary(("a", "b")))
    assert_allclose(transition_distribution(model, [1, 0, 0, 1]), [0.2, 0.8])


def test_first_order_weights_score_like_a_markov_chain(random_model):
    rng = np.random.default_rng(0)
    for seed in range(100):
        n, k = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        model = random_model(n, k, seed)
        weights = np.zeros(k)
        weights[0] = 1.0
        first = model.replace(w=HistoryDistribution(weights))
        seqs = tuple(rng.integers(0, n, size=rng.integers(1, 30)) for _ in range(4))
        dense = model.P.to_dense()
        expected = sum(float(np.log(dense[s[:-1], s[1:]]).sum()) for s in seqs)
        assert log_likelihood(first, Corpus(model.vocab, seqs)).total == pytest.approx(expected, rel=1e-12)


def test_log_likelihood_matches_brute_force_sum(random_model):
    rng = np.random.default_rng(1)
    for seed in range(200):
        n, k = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        model = random_model(n, k, seed)
        w, dense = model.w.weights, model.P.to_dense()
        seqs = [rng.integers(0, n, size=rng.integers(1, 7)).tolist() for _ in range(3)]
        expected = 0.0
        for seq in seqs:
            for j in range(1, len(seq)):
                expected += math.log(sum(w[i - 1] * dense[seq[max(0, j - i)], seq[j]] for i in range(1, k + 1)))
        assert log_likelihood(model, Corpus(model.vocab, tuple(seqs))).total == pytest.approx(expected, abs=1e-12)


def test_states_older_than_k_do_not_matter(random_model):
    rng = np.random.default_rng(2)
    for seed in range(50):
        n, k = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        model = random_model(n, k, seed)
        recent = rng.integers(0, n, size=k).tolist()
        base = transition_distribution(model, recent)
        for _ in range(3):
            older = rng.integers(0, n, size=rng.integers(1, 6)).tolist()
            assert_array_equal(transition_distribution(model, older + recent), base)


def test_transition_rejects_bad_history(two_state_model):
    with pytest.raises(InvalidStateError):
        transition_distribution(two_state_model, [])
    with pytest.raises(InvalidStateError):
        transition_distribution(two_state_model, [0, 2])


def test_worked_log_likelihood(two_state_model, worked_corpus):
    result = log_likelihood(two_state_model, worked_corpus)
    assert result.total == pytest.approx(math.log(0.1) + math.log(0.52))
    assert result.total == pytest.approx(-2.956512, abs=1e-6)
    assert result.transitions == 2
    assert result.impossible == 0
    assert_allclose(result.per_sequence, [result.total])


def test_worked_perplexity(two_state_model, worked_corpus):
    assert perplexity(two_state_model, worked_corpus) == pytest.approx(4.38529, abs=1e-4)


def test_single_element_sequences_score_nothing(two_state_model):
    corpus = Corpus(two_state_model.vocab, ([0], [1]))
    result = log_likelihood(two_state_model, corpus)
    assert result.total == 0.0
    assert result.transitions == 0
    with pytest.raises(DataError):
        perplexity(two_state_model, corpus)


def test_uniform_chain_perplexity_is_state_count():
    n = 5
    P = SparseStochasticMatrix.from_dense(np.full((n, n), 1.0 / n))
    vocab = Vocabulary(tuple("abcde"))
    model = LampModel(HistoryDistribution.geometric(3, 0.8), P, vocab)
    corpus = Corpus(vocab, ([0, 3, 3, 1, 4, 2], [2, 2, 0]))
    assert perplexity(model, corpus) == pytest.approx(5.0)


def test_deterministic_cycle_has_perplexity_one():
    P = SparseStochasticMatrix.from_rows([[(1, 1.0)], [(2, 1.0)], [(0, 1.0)]])
    vocab = Vocabulary(("x", "y", "z"))
    model = LampModel(HistoryDistribution.first_order(), P, vocab)
    corpus = Corpus(vocab, ([0, 1, 2, 0, 1], [2, 0]))
    assert perplexity(model, corpus) == pytest.approx(1.0)


def test_impossible_transition_counts_and_floor():
    vocab = Vocabulary(("a", "b", "c"))
    P = SparseStochasticMatrix.from_rows([[(0, 0.9), (1, 0.1)], [(0, 0.2), (1, 0.8)], [(0, 1.0)]])
    model = LampModel(HistoryDistribution([0.6, 0.4]), P, vocab)
    corpus = Corpus(vocab, ([0, 1, 1], [0, 2, 0]))
    result = log_likelihood(model, corpus)
    assert result.total == -math.inf
    assert result.impossible == 1
    assert result.per_sequence[0] == pytest.approx(math.log(0.1) + math.log(0.52))
    assert result.perplexity == math.inf

    floor = 1e-10
    smoothed = log_likelihood(model, corpus, floor=floor)
    assert smoothed.impossible == 0
    expected = math.log((0.1 + floor) / (1 + 3 * floor)) + math.log((0.52 + floor) / (1 + 3 * floor))
    assert smoothed.per_sequence[0] == pytest.approx(expected)
    assert math.isfinite(smoothed.perplexity)


def test_sequences_are_scored_independently(two_state_model):
    vocab = two_state_model.vocab
    a, b = [0, 1, 1, 0], [1, 0, 0]
    joined = log_likelihood(two_state_model, Corpus(vocab, (a, b))).total
    separate = (log_likelihood(two_state_model, Corpus(vocab, (a,))).total
                + log_likelihood(two_state_model, Corpus(vocab, (b,))).total)
    assert joined == pytest.approx(separate)


def test_vocabulary_mismatch_is_rejected(two_state_model):
    corpus = Corpus(Vocabulary(("b", "a")), ([0, 1],))
    with pytest.raises(VocabularyError):
        log_likelihood(two_state_model, corpus)


def test_scoring_table_does_not_depend_on_threads(random_model):
    model = random_model(4, 3, seed=7)
    rng = np.random.default_rng(1)
    seqs = tuple(rng.integers(0, 4, size=rng.integers(1, 8)) for _ in range(CHUNK_SIZE * 2 + 17))
    corpus = Corpus(model.vocab, seqs)
    one = ScoringTable.build(corpus, 3, threads=1)
    many = ScoringTable.build(corpus, 3, threads=4)
    assert_array_equal(one.sources, many.sources)
    assert_array_equal(one.targets, many.targets)
    assert_array_equal(one.sequence_ids, many.sequence_ids)
    assert log_likelihood(model, corpus, threads=4).total == log_likelihood(model, corpus).total


def test_generate_length_one_is_start(two_state_model):
    assert_array_equal(generate(two_state_model, 1, 1, seed=3), [1])


def test_generate_is_seeded_and_stays_on_support(cycle_model):
    model = cycle_model(n=5, epsilon=0.4)
    path = generate(model, 2, 500, seed=11)
    assert_array_equal(path, generate(model, 2, 500, seed=11))
    assert path[0] == 2
    for t in range(1, path.size):
        history = path[:t]
        assert transition_distribution(model, history)[path[t]] > 0


def test_generate_argument_errors(two_state_model):
    with pytest.raises(DataError):
        generate(two_state_model, 0, 0)
    with pytest.raises(InvalidStateError):
        generate(two_state_model, 5, 3)


def test_generate_reports_empty_row():
    P = SparseStochasticMatrix.from_triples(2, [0], [1], [1.0])
    model = LampModel(HistoryDistribution.first_order(), P, Vocabulary(("a", "b")))
    with pytest.raises(EmptyRowError):
        generate(model, 0, 3, seed=0)


def test_generate_many_shape_and_support(cycle_model):
    model = cycle_model(n=4, epsilon=0.5)
    paths = generate_many(model, [0, 1, 2], 40, 3, seed=5)
    assert paths.shape == (3, 40)
    assert_array_equal(paths[:, 0], [0, 1, 2])
    assert_array_equal(paths, generate_many(model, [0, 1, 2], 40, 3, seed=5))
    for path in paths:
        for t in range(1, path.size):
            assert transition_distribution(model, path[:t])[path[t]] > 0


def test_cycle_construction_repeats_twice_but_never_three_times(cycle_model):
    model = cycle_model(n=4, epsilon=0.3)
    paths = generate_many(model, 1, 2_000, 50, seed=2)
    doubles = paths[:, 1:] == paths[:, :-1]
    triples = doubles[:, 1:] & doubles[:, :-1]
    tripled_states = paths[:, 2:][triples]
    assert np.all(tripled_states == 0)
    assert np.any(paths[:, 1:][doubles] != 0)


@pytest.mark.slow
def test_cycle_construction_million_steps(cycle_model):
    model = cycle_model(n=4, epsilon=0.3)
    path = generate(model, 1, 1_000_000, seed=0)
    doubles = path[1:] == path[:-1]
    triples = doubles[1:] & doubles[:-1]
    assert not np.any(path[2:][triples] != 0)
    assert np.any(path[1:][doubles] != 0)


def test_history_distribution_validation_and_moments():
    w = HistoryDistribution([0.5, 0.5])
    assert w.k == 2
    assert w.mean == pytest.approx(1.5)
    assert w.variance == pytest.approx(0.25)
    geometric = HistoryDistribution.geometric(3, 0.8)
    assert_allclose(geometric.weights, np.array([0.8, 0.64, 0.512]) / 1.952)
    assert_allclose(HistoryDistribution.parse("1, 3").weights, [0.25, 0.75])
    for bad in ([], [0.5, 0.6], [1.5, -0.5], [float("nan"), 1.0]):
        with pytest.raises(DataError):
            HistoryDistribution(bad)
    with pytest.raises(DataError):
        HistoryDistribution.parse("a,b")


def test_matrix_validation():
    with pytest.raises(DataError):
        SparseStochasticMatrix.from_dense([[0.5, 0.4], [0.0, 1.0]])
    with pytest.raises(DataError):
        SparseStochasticMatrix.from_triples(2, [0, 0], [1, 1], [0.5, 0.5])
    with pytest.raises(InvalidStateError):
        SparseStochasticMatrix.from_triples(2, [0], [2], [1.0])


def test_matrix_support_lookup():
    P = SparseStochasticMatrix.from_rows([[(2, 0.25), (0, 0.75)], [], [(1, 1.0)]])
    assert_array_equal(P.indices, [0, 2, 1])
    assert_array_equal(P.find([0, 0, 1, 2], [0, 1, 0, 1]), [0, -1, -1, 2])
    assert P.get(0, 2) == 0.25
    assert P.get(1, 1) == 0.0
    assert_array_equal(P.empty_rows(), [1])
    assert P.support_size == 3


def test_sampling_table_rows_end_at_one():
    P = SparseStochasticMatrix.from_rows([[(0, 0.1), (1, 0.2), (2, 0.7)], [], [(1, 1.0)]])
    cumulative, keys = P.sampling_table()
    assert_allclose(cumulative, [0.1, 0.3, 1.0, 1.0])
    assert cumulative[2] == 1.0
    assert np.all(np.diff(keys) > 0)


def test_zero_entries_stay_in_the_support():
    P = SparseStochasticMatrix.from_dense([[0.0, 1.0], [0.5, 0.5]], keep_zeros=True)
    assert P.support_size == 4
    assert P.find(0, 0) == 0
    assert SparseStochasticMatrix.from_dense([[0.0, 1.0], [0.5, 0.5]]).support_size == 3


def test_model_file_round_trip(tmp_path, two_state_model):
    path = tmp_path / "model.json"
    save_model(two_state_model, path)
    doc = json.loads(path.read_text())
    assert doc["k"] == 2 and doc["n"] == 2 and doc["vocab"] == ["a", "b"]
    loaded = load_model(path)
    assert loaded.P == two_state_model.P
    assert_array_equal(loaded.w.weights, two_state_model.w.weights)
    assert loaded.num_parameters == 4 + 2


def test_load_model_errors(tmp_path):
    with pytest.raises(DataError):
        load_model(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError):
        load_model(bad)
    bad.write_text(json.dumps({"k": 1, "w": [1.0], "n": 2, "vocab": ["a", "b"],
                               "matrix": [[0, 1, 0.5]]}))
    with pytest.raises(DataError):
        load_model(bad)


def test_corpus_encoding():
    corpus = Corpus.from_tokens([["a", "b", "a"], ["c"]])
    assert corpus.vocab.tokens == ("a", "b", "c")
    assert corpus.total_transitions == 2
    assert corpus.total_tokens == 4
    assert corpus.token_sequences() == [["a", "b", "a"], ["c"]]
    with pytest.raises(VocabularyError):
        Corpus.from_tokens([["a", "z"]], vocab=corpus.vocab)
    with pytest.raises(DataError):
        Corpus(corpus.vocab, ([],))
