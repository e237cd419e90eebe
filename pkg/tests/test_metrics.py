import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daae_lab.corpus import Corpus
from daae_lab.metrics import (
    EvalReport,
    LMConfig,
    apply_offset,
    attribute_vector,
    corpus_bleu,
    edit_distance_matrix,
    evaluate_model,
    forward_reverse_ppl,
    interpolate,
    knn_label_purity,
    latent_distances,
    levenshtein,
    nearest_others,
    normalized_edit_distance,
    perplexity,
    read_reports,
    recall_at_k,
    train_lm,
)
from daae_lab.seqmodel import LanguageModel, ModelConfig, SeqAutoencoder

tokens = st.lists(st.integers(5, 8), max_size=8)


def reference_levenshtein(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


class TestEditDistance:
    def test_kitten_sitting(self):
        assert normalized_edit_distance("k i t t e n".split(), "s i t t i n g".split()) == pytest.approx(3 / 7, abs=1e-12)

    def test_identical_and_disjoint(self):
        assert normalized_edit_distance([1, 2, 3], [1, 2, 3]) == 0.0
        assert normalized_edit_distance([1] * 5, [2] * 5) == 1.0
        assert normalized_edit_distance([], []) == 0.0

    def test_metric_axioms_on_short_binary_strings(self):
        words = [w for n in range(5) for w in itertools.product((5, 6), repeat=n)]
        for a in words:
            for b in words:
                d = normalized_edit_distance(a, b)
                assert d == normalized_edit_distance(b, a)
                assert (d == 0) == (a == b)

    @settings(max_examples=200, deadline=None)
    @given(tokens, tokens, tokens)
    def test_triangle_inequality(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)

    @settings(max_examples=200, deadline=None)
    @given(tokens, tokens)
    def test_matches_reference_dp(self, a, b):
        assert levenshtein(a, b) == reference_levenshtein(a, b)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(0)
        seqs = [list(rng.integers(5, 8, rng.integers(0, 9))) for _ in range(30)]
        m = edit_distance_matrix(seqs, seqs, block=7)
        expected = [[reference_levenshtein(a, b) for b in seqs] for a in seqs]
        np.testing.assert_array_equal(m, expected)


class TestNeighbors:
    def test_ties_broken_by_index(self):
        dist = np.zeros((4, 4))
        assert nearest_others(dist, 2).tolist() == [[1, 2], [0, 2], [0, 1], [0, 1]]

    def test_recall_perfect_when_rankings_agree(self):
        # 6^i 5^(L-i) are at edit distance |i - j|, as are the 1-D codes i
        L = 30
        seqs = [[6] * i + [5] * (L - i) for i in range(L + 1)]
        z = np.arange(L + 1.0)[:, None]
        assert recall_at_k(seqs, z, k=10) == 1.0

    def test_recall_monotone_in_k(self):
        rng = np.random.default_rng(1)
        seqs = [list(rng.integers(5, 8, 6)) for _ in range(60)]
        z = rng.normal(size=(60, 2))
        values = [recall_at_k(seqs, z, k) for k in (10, 20, 30, 59)]
        assert values == sorted(values) and values[-1] == 1.0

    def test_recall_argument_checks(self):
        seqs = [[5]] * 12
        with pytest.raises(ValueError):
            recall_at_k(seqs, np.zeros((12, 2)), k=12)
        with pytest.raises(ValueError):
            recall_at_k(seqs[:11], np.zeros((11, 2)))
        with pytest.raises(ValueError):
            recall_at_k(seqs, np.zeros((13, 2)))

    def test_recall_subsamples_large_corpora(self):
        rng = np.random.default_rng(2)
        seqs = [list(rng.integers(5, 8, 5)) for _ in range(80)]
        z = rng.normal(size=(80, 2))
        assert 0.0 <= recall_at_k(seqs, z, subsample=40, seed=3) <= 1.0

    def test_purity_separated_blobs(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(3), 20)
        z = rng.normal(scale=0.1, size=(60, 2)) + 10 * labels[:, None]
        assert knn_label_purity(z, labels, 10) == 1.0

    def test_purity_shuffled_labels(self):
        rng = np.random.default_rng(0)
        labels = rng.permutation(np.repeat(np.arange(5), 100))
        z = rng.normal(size=(500, 2))
        # expectation 99/499 under random labels
        assert abs(knn_label_purity(z, labels, 10) - 99 / 499) < 0.03

    def test_purity_k_too_large(self):
        with pytest.raises(ValueError):
            knn_label_purity(np.zeros((5, 2)), [0] * 5, k=5)

    def test_latent_distances(self):
        z = np.array([[0.0, 0.0], [3.0, 4.0]])
        np.testing.assert_allclose(latent_distances(z), [[0, 5], [5, 0]])


class TestBleu:
    def test_identity(self):
        corpus = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]]
        assert corpus_bleu(corpus, corpus) == 100.0

    def test_brevity_penalty(self):
        score = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
        assert score == pytest.approx(100 * math.exp(1 - 5 / 4), abs=1e-9)
        assert score == pytest.approx(77.88, abs=0.01)

    def test_no_overlap_near_zero(self):
        assert corpus_bleu([["a", "b", "c", "d"]], [["w", "x", "y", "z"]]) < 1e-6

    def test_errors(self):
        with pytest.raises(ValueError):
            corpus_bleu([], [])
        with pytest.raises(ValueError):
            corpus_bleu([["a"]], [])

    def test_clipped_counts(self):
        # "the the the the" against "the cat": unigram precision 1/4
        score = corpus_bleu([["the"] * 4], [["the", "cat"]], max_n=1)
        assert score == pytest.approx(25.0)


def small_model(seed=0, **kw):
    cfg = dict(vocab_size=9, embed_dim=8, hidden_dim=16, latent_dim=2, disc_hidden=8, max_length=10)
    cfg.update(kw)
    return SeqAutoencoder(ModelConfig(**cfg), seed=seed)


class TestPerplexity:
    def test_untrained_uniform_output_gives_vocab_size(self):
        lm = LanguageModel(ModelConfig(vocab_size=12, embed_dim=4, hidden_dim=4, max_length=10))
        lm.params["lm.w_out"].data[:] = 0
        assert perplexity(lm, [[5, 6, 7], [8, 9]]) == pytest.approx(12.0)

    def test_trained_on_uniform_streams(self):
        rng = np.random.default_rng(0)
        V = 8
        streams = lambda n: [list(rng.integers(5, 5 + V, 20)) for _ in range(n)]
        lm = train_lm(streams(300), 5 + V, 20, LMConfig(embed_dim=8, hidden_dim=16, epochs=15, batch_size=32, lr=1e-2))
        ppl = perplexity(lm, streams(100))
        # best achievable on length-20 streams (end token learned exactly) is V**(20/21)
        assert abs(ppl - V) < 0.1 * V

    def test_reverse_ppl_detects_collapse(self):
        m = small_model()
        m.params["dec.w_out"].data[:] = 0
        m.params["dec.b_out"].data[:] = 0
        m.params["dec.b_out"].data[6] = 5.0  # always emits one token, never ends
        rng = np.random.default_rng(0)
        real = [list(rng.integers(5, 9, rng.integers(3, 8))) for _ in range(60)]
        cfg = LMConfig(embed_dim=8, hidden_dim=16, epochs=5, batch_size=16, lr=1e-2)
        fwd, rev, warn = forward_reverse_ppl(m, real, 30, cfg)
        assert rev > fwd and not warn

    def test_all_empty_samples_flagged(self):
        m = small_model()
        m.params["dec.w_out"].data[:] = 0
        m.params["dec.b_out"].data[:] = 0
        m.params["dec.b_out"].data[2] = 10.0  # end token first
        cfg = LMConfig(embed_dim=4, hidden_dim=4, epochs=1)
        fwd, rev, warn = forward_reverse_ppl(m, [[5, 6]] * 4, 5, cfg)
        assert math.isinf(rev) and warn


class TestManipulation:
    def test_interpolation_endpoints_and_symmetry(self):
        m = small_model(seed=3)
        x1, x2 = [5, 6, 7, 8], [8, 8, 5]
        out = interpolate(m, x1, x2, 5)
        assert out[0] == m.reconstruct([x2])[0]
        assert out[-1] == m.reconstruct([x1])[0]
        assert interpolate(m, x2, x1, 5) == out[::-1]

    def test_interpolation_needs_two_steps(self):
        with pytest.raises(ValueError):
            interpolate(small_model(), [5], [6], 1)

    def test_attribute_vector(self):
        m = small_model()
        pos, neg = [[5, 6], [7, 7, 7]], [[8], [5, 5]]
        np.testing.assert_allclose(attribute_vector(m, pos, pos), 0.0, atol=1e-15)
        np.testing.assert_allclose(attribute_vector(m, pos, neg), -attribute_vector(m, neg, pos))
        with pytest.raises(ValueError):
            attribute_vector(m, [], neg)

    def test_offset_zero_scale_is_reconstruction(self):
        m = small_model(seed=1)
        x = [5, 7, 8]
        assert apply_offset(m, x, np.ones(2), 0.0) == m.reconstruct([x])[0]
        assert apply_offset(m, x, np.ones(2), 1.5) == apply_offset(m, x, np.ones(2), 1.5)
        with pytest.raises(ValueError):
            apply_offset(m, x, np.ones(2), math.inf)


class TestReport:
    def test_non_finite_becomes_null_with_warning(self):
        r = EvalReport("m")
        r.add("reverse_ppl", math.inf)
        r.add("bleu", 50.0)
        d = json.loads(r.to_json())
        assert d["metrics"] == {"reverse_ppl": None, "bleu": 50.0}
        assert any("reverse_ppl" in w for w in d["warnings"])

    def test_jsonl_round_trip(self, tmp_path):
        a, b = EvalReport("a", {"x": 1.0}, {"k": 10}), EvalReport("b", {"y": 2.5})
        a.append_to(tmp_path / "r.jsonl")
        b.append_to(tmp_path / "r.jsonl")
        assert read_reports(tmp_path / "r.jsonl") == [a, b]

    def test_evaluate_model_fields(self):
        rng = np.random.default_rng(0)
        corpus = Corpus.from_lists([list(rng.integers(5, 9, 6)) for _ in range(20)], labels=[i % 2 for i in range(20)])
        r = evaluate_model(small_model(), corpus, "tiny", ks=(10,))
        assert set(r.metrics) == {"bleu", "token_accuracy", "recall@10", "purity@10"}
        assert all(v is not None and math.isfinite(v) for v in r.metrics.values())
        assert r.params["n"] == 20
