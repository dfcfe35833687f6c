'''
Unit tests for the retrieval engine.

Tests cover:
- build_index normalization and error contracts
- query_topk ordering, tie rule, scale invariance and a full-sort oracle
- recall_at_k closed forms and monotonicity
- evaluate_bidirectional with perfect and untrained models
- Validation recall of a trained model against chance
- Index persistence
'''

import numpy as np
import pytest

from bevsearch.config import AlignTrainConfig
from bevsearch.errors import DataError, NumericalError, ShapeError, UsageError
from bevsearch.retrieval_engine import (RankedList, build_index, evaluate_bidirectional, load_index,
                                        query_topk, recall_at_k, relevance_by_caption, save_index)
from bevsearch.sce_align import AlignmentModel, train_align
from bevsearch.tensor_io import save_bundle
from bevsearch.text_pipeline import Vocabulary

# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------

class ClassOracleModel:
    '''Embeds every sample as the one-hot vector of its caption.'''

    def __init__(self, corpus):
        captions = sorted({caption for _, caption in corpus.texts})
        self.slot = {caption: i for i, caption in enumerate(captions)}
        self.by_scene = {s.sample_id: s for s in corpus.scenes}
        self.caption_of = corpus.caption_of()
        self.width = len(captions)

    def _one_hot(self, caption):
        vector = np.zeros(self.width)
        vector[self.slot[caption]] = 1.0
        return vector

    def scene_vectors(self, bev_batch):
        lookup = {s.bev_sequence.tobytes(): self.caption_of[s.sample_id] for s in self.by_scene.values()}
        return np.stack([self._one_hot(lookup[np.asarray(b).tobytes()]) for b in bev_batch])

    def text_vectors(self, captions):
        return np.stack([self._one_hot(c) for c in captions])

# -------------------------------------------------------------------------------------------------
# build_index
# -------------------------------------------------------------------------------------------------

class TestBuildIndex:
    '''Index construction.'''

    def test_count(self):
        index = build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [1.0, 1.0])])
        assert index.count == 3
        assert index.ids == ["a", "b", "c"]

    def test_rows_are_unit_norm(self, rng):
        index = build_index([(f"s{i}", rng.normal(size=5)) for i in range(10)])
        np.testing.assert_allclose(np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-9)

    def test_normalization_example(self):
        index = build_index([("a", [3.0, 4.0])])
        np.testing.assert_allclose(index.vectors[0], [0.6, 0.8])

    def test_duplicate_id(self):
        with pytest.raises(DataError):
            build_index([("a", [1.0]), ("a", [2.0])])

    def test_zero_vector(self):
        with pytest.raises(NumericalError):
            build_index([("a", [0.0, 0.0])])

    def test_mixed_dimensions(self):
        with pytest.raises(ShapeError):
            build_index([("a", [1.0, 0.0]), ("b", [1.0, 0.0, 0.0])])

    def test_empty(self):
        with pytest.raises(DataError):
            build_index([])

# -------------------------------------------------------------------------------------------------
# query_topk
# -------------------------------------------------------------------------------------------------

class TestQueryTopk:
    '''Exact cosine ranking.'''

    def test_stored_vector_ranks_first(self, rng):
        vectors = rng.normal(size=(6, 4))
        index = build_index([(f"s{i}", v) for i, v in enumerate(vectors)])
        ranked = query_topk(index, vectors[3], 3)
        assert ranked.ids[0] == "s3"
        assert ranked.scores[0] == pytest.approx(1.0)

    def test_k_larger_than_pool(self):
        index = build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0])])
        assert len(query_topk(index, [1.0, 1.0], 10).ids) == 2

    def test_ties_go_to_smaller_id(self):
        index = build_index([("b", [1.0, 0.0]), ("a", [1.0, 0.0]), ("c", [0.0, 1.0])])
        assert query_topk(index, [1.0, 0.0], 3).ids == ["a", "b", "c"]

    def test_scores_non_increasing(self, rng):
        index = build_index([(f"s{i}", rng.normal(size=8)) for i in range(30)])
        scores = query_topk(index, rng.normal(size=8), 30).scores
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_positive_scaling_keeps_top1(self, rng):
        index = build_index([(f"s{i}", rng.normal(size=6)) for i in range(20)])
        for _ in range(50):
            q = rng.normal(size=6)
            assert query_topk(index, q, 1).ids == query_topk(index, q * rng.uniform(0.01, 100.0), 1).ids

    def test_matches_full_sort_oracle(self, rng):
        for _ in range(10000):
            count, dim, k = rng.integers(1, 12), rng.integers(1, 5), rng.integers(1, 15)
            # few distinct values so exact ties occur often
            vectors = rng.integers(-2, 3, size=(count, dim)).astype(float)
            vectors[np.all(vectors == 0, axis=1), 0] = 1.0
            ids = [f"id{int(j):02d}" for j in rng.permutation(count)]
            index = build_index(zip(ids, vectors))
            query = rng.integers(-2, 3, size=dim).astype(float)
            query[0] = query[0] or 1.0
            scores = index.vectors @ (query / np.linalg.norm(query))
            oracle = sorted(range(count), key=lambda i: (-scores[i], ids[i]))[:k]
            assert query_topk(index, query, k).ids == [ids[i] for i in oracle]

    def test_dimension_mismatch(self):
        index = build_index([("a", [1.0, 0.0])])
        with pytest.raises(ShapeError):
            query_topk(index, [1.0, 0.0, 0.0], 1)

    def test_k_must_be_positive(self):
        index = build_index([("a", [1.0, 0.0])])
        with pytest.raises(UsageError):
            query_topk(index, [1.0, 0.0], 0)

# -------------------------------------------------------------------------------------------------
# recall_at_k
# -------------------------------------------------------------------------------------------------

def _ranked(query_id, ids):
    return RankedList(query_id=query_id, ids=ids, scores=[1.0 - 0.01 * i for i in range(len(ids))])


class TestRecallAtK:
    '''R@K closed forms.'''

    def test_all_first(self):
        ranked = [_ranked(f"q{i}", [f"q{i}"] + [f"x{j}" for j in range(9)]) for i in range(4)]
        truth = {f"q{i}": {f"q{i}"} for i in range(4)}
        assert recall_at_k(ranked, truth) == {1: 1.0, 5: 1.0, 10: 1.0}

    def test_always_third(self):
        ranked = [_ranked(f"q{i}", ["x", "y", f"q{i}", "z"]) for i in range(3)]
        truth = {f"q{i}": {f"q{i}"} for i in range(3)}
        recall = recall_at_k(ranked, truth)
        assert recall[1] == 0.0
        assert recall[5] == 1.0

    def test_any_relevant_counts(self):
        ranked = [_ranked("q", ["a", "b", "c"])]
        assert recall_at_k(ranked, {"q": {"c", "b"}}, ks=(1, 2))[2] == 1.0

    def test_random_ranking_near_tenth(self, rng):
        pool = [f"c{i}" for i in range(100)]
        ranked, truth = [], {}
        for q in range(4000):
            ranked.append(_ranked(f"q{q}", [str(c) for c in rng.permutation(pool)[:10]]))
            truth[f"q{q}"] = {pool[int(rng.integers(100))]}
        assert recall_at_k(ranked, truth)[10] == pytest.approx(0.10, abs=0.02)

    def test_missing_truth(self):
        with pytest.raises(DataError):
            recall_at_k([_ranked("q", ["a"])], {})

    def test_monotone_in_k(self, rng):
        pool = [f"c{i}" for i in range(20)]
        ranked = [_ranked(f"q{q}", [str(c) for c in rng.permutation(pool)]) for q in range(50)]
        truth = {f"q{q}": {pool[q % 20]} for q in range(50)}
        recall = recall_at_k(ranked, truth, ks=(1, 3, 5, 10, 20))
        values = [recall[k] for k in (1, 3, 5, 10, 20)]
        assert values == sorted(values)
        assert values[-1] == 1.0


class TestRelevance:
    '''Caption identity defines relevance.'''

    def test_shared_captions(self):
        captions = {"a": "x", "b": "x", "c": "y"}
        truth = relevance_by_caption(["a", "c"], ["a", "b", "c"], captions)
        assert truth == {"a": {"a", "b"}, "c": {"c"}}

# -------------------------------------------------------------------------------------------------
# evaluate_bidirectional
# -------------------------------------------------------------------------------------------------

class TestEvaluateBidirectional:
    '''Both retrieval directions over a corpus split.'''

    def test_perfect_model_scores_one(self, small_corpus):
        report = evaluate_bidirectional(small_corpus, ClassOracleModel(small_corpus), checkpoint_hash="abc")
        assert report.text_retrieval == {"R@1": 1.0, "R@5": 1.0, "R@10": 1.0}
        assert report.scene_retrieval == {"R@1": 1.0, "R@5": 1.0, "R@10": 1.0}
        assert report.pool_size == 8
        assert report.checkpoint_hash == "abc"

    def test_untrained_model_metrics_nest(self, small_corpus, small_config):
        vocab = Vocabulary.build(caption for _, caption in small_corpus.texts)
        model = AlignmentModel.create(small_config, vocab, d_b=32)
        report = evaluate_bidirectional(small_corpus, model, split=None)
        for metrics in (report.text_retrieval, report.scene_retrieval):
            assert 0.0 <= metrics["R@1"] <= metrics["R@5"] <= metrics["R@10"] <= 1.0
        assert report.pool_size == 24

    def test_empty_split(self, small_corpus):
        corpus = small_corpus.model_copy(update={"split": {i: "train" for i in small_corpus.split}})
        with pytest.raises(DataError):
            evaluate_bidirectional(corpus, ClassOracleModel(corpus))


class TestTrainedRetrieval:
    '''Validation recall after training on a separable corpus.'''

    @pytest.mark.slow
    def test_trained_model_retrieves_both_ways(self, separable_corpus):
        model = train_align(separable_corpus, None, AlignTrainConfig(seed=0)).model
        report = evaluate_bidirectional(separable_corpus, model)
        assert report.pool_size == 32
        for metrics in (report.text_retrieval, report.scene_retrieval):
            assert metrics["R@1"] >= 0.9
            assert metrics["R@5"] >= 0.99

    def test_untrained_models_score_near_chance(self, separable_corpus):
        vocab = Vocabulary.build(caption for _, caption in separable_corpus.texts)
        recall = []
        for seed in range(5):
            model = AlignmentModel.create(AlignTrainConfig(seed=seed), vocab, d_b=32)
            report = evaluate_bidirectional(separable_corpus, model)
            recall += [report.text_retrieval["R@1"], report.scene_retrieval["R@1"]]
        assert np.mean(recall) <= 3 / 32

# -------------------------------------------------------------------------------------------------
# Persistence
# -------------------------------------------------------------------------------------------------

class TestIndexFiles:
    '''save_index / load_index.'''

    def test_reload(self, tmp_path, rng):
        index = build_index([(f"s{i}", rng.normal(size=4)) for i in range(5)])
        path = save_index(tmp_path / "index.tsr", index, {"split": "all"})
        loaded = load_index(path)
        assert loaded.ids == index.ids
        np.testing.assert_allclose(loaded.vectors, index.vectors, atol=1e-12)

    def test_not_an_index(self, tmp_path):
        save_bundle(tmp_path / "other.tsr", {"x": np.ones(2)}, {})
        with pytest.raises(DataError):
            load_index(tmp_path / "other.tsr")
