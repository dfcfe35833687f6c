'''
Unit tests for knowledge graph storage and embedding training.

Tests cover:
- Scoring function closed forms
- Graph loading, deduplication and file errors
- TransE / DistMult training on small graphs
- Filtered link prediction against a random control
- Synonym lookup and checkpoint persistence
'''

import numpy as np
import pytest

from bevsearch.config import KgeTrainConfig
from bevsearch.errors import DataError, ShapeError, UsageError
from bevsearch.kg_embed import (KgeModel, KnowledgeBase, Scorer, SynonymTable, _filtered_rank,
                                driving_graph, evaluate_link_prediction, load_graph, load_graph_file,
                                load_kge, lookup_embedding, save_kge, score_distmult, score_transe,
                                train_kge)


def family_graph():
    '''Five couples with two children each; no symmetric relations.'''
    triples = []
    for f in range(5):
        husband, wife = f"husband{f}", f"wife{f}"
        triples.append((husband, "married_to", wife))
        for c in range(2):
            child = f"child{f}_{c}"
            triples.append((husband, "father_of", child))
            triples.append((wife, "mother_of", child))
    return load_graph(triples)


@pytest.fixture(scope="module")
def trained_family():
    graph = family_graph()
    return graph, train_kge(graph, KgeTrainConfig(iterations=2000, seed=11))

# -------------------------------------------------------------------------------------------------
# Scoring
# -------------------------------------------------------------------------------------------------

class TestScoring:
    '''Closed-form scores.'''

    def test_transe_exact_translation_scores_zero(self):
        assert score_transe([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]) == 0.0

    def test_transe_norms(self):
        assert score_transe([0.0, 0.0], [3.0, 4.0], [0.0, 0.0], p=2) == pytest.approx(-5.0)
        assert score_transe([0.0, 0.0], [3.0, 4.0], [0.0, 0.0], p=1) == pytest.approx(-7.0)

    def test_distmult(self):
        assert score_distmult([1.0, 2.0], [3.0, 4.0], [5.0, 6.0]) == pytest.approx(63.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            score_distmult([1.0, 2.0], [3.0], [5.0, 6.0])

    def test_bad_norm_order(self):
        with pytest.raises(UsageError):
            score_transe([1.0], [1.0], [1.0], p=3)

# -------------------------------------------------------------------------------------------------
# Graph loading
# -------------------------------------------------------------------------------------------------

class TestLoadGraph:
    '''Vocabularies and triple lists.'''

    def test_duplicates_dropped(self):
        graph = load_graph([("a", "r", "b"), ("a", "r", "b"), ("b", "r", "c")])
        assert graph.entities == {"a": 0, "b": 1, "c": 2}
        assert graph.triples == [(0, 0, 1), (1, 0, 2)]
        assert graph.duplicates_dropped == 1

    def test_empty_component(self):
        with pytest.raises(DataError):
            load_graph([("a", " ", "b")])

    def test_no_triples(self):
        with pytest.raises(UsageError):
            load_graph([])

    def test_file_error_names_line(self, tmp_path):
        path = tmp_path / "graph.tsv"
        path.write_text("a\tr\tb\n# comment\nbroken line\n", encoding="utf-8")
        with pytest.raises(DataError, match=r":3:"):
            load_graph_file(path)

    def test_file_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "graph.tsv"
        path.write_text("# header\n\na\tr\tb\nb\tr\tc\n", encoding="utf-8")
        assert len(load_graph_file(path).triples) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_graph_file(tmp_path / "absent.tsv")

    def test_encode_unknown_name(self):
        graph = load_graph([("a", "r", "b")])
        assert graph.encode("a", "r", "b") == (0, 0, 1)
        with pytest.raises(DataError):
            graph.encode("a", "r", "z")

# -------------------------------------------------------------------------------------------------
# Training and link prediction
# -------------------------------------------------------------------------------------------------

class TestTraining:
    '''Embedding training on small graphs.'''

    def test_transe_recovers_family_graph(self, trained_family):
        graph, model = trained_family
        report = evaluate_link_prediction(model, graph, graph.triples)
        assert report.count == 25
        assert report.hits_at_1 >= 0.8
        assert report.mrr >= 0.85

    def test_late_loss_does_not_rise(self, trained_family):
        _, model = trained_family
        tail = np.asarray(model.loss_history[-200:])
        slope = np.polyfit(np.arange(len(tail)), tail, 1)[0]
        assert slope <= 1e-4
        assert tail.mean() <= np.mean(model.loss_history[:200])

    def test_chain_positives_outscore_corruptions(self):
        graph = load_graph([("a", "r", "b"), ("b", "r", "c")])
        model = train_kge(graph, KgeTrainConfig(iterations=2000, seed=0))
        E, R = model.entity_embeddings, model.relation_embeddings
        known = graph.triple_set()
        corrupted = set()
        for h, r, t in known:
            for e in range(len(graph.entities)):
                corrupted.update({(e, r, t), (h, r, e)})
        corrupted -= known
        positive = np.mean([score_transe(E[h], R[r], E[t]) for h, r, t in known])
        negative = np.mean([score_transe(E[h], R[r], E[t]) for h, r, t in corrupted])
        assert positive > negative

    def test_random_embeddings_rank_poorly(self):
        graph = family_graph()
        gen = np.random.default_rng(0)
        model = KgeModel(entity_embeddings=gen.normal(size=(20, 32)),
                         relation_embeddings=gen.normal(size=(3, 32)), scorer=Scorer.TRANSE_L2)
        assert evaluate_link_prediction(model, graph, graph.triples).mrr < 0.5

    def test_transe_rows_are_unit_norm(self):
        graph = family_graph()
        model = train_kge(graph, KgeTrainConfig(iterations=20, seed=2))
        np.testing.assert_allclose(np.linalg.norm(model.entity_embeddings, axis=1), 1.0, atol=1e-9)

    def test_distmult_loss_decreases(self):
        graph, _ = driving_graph()
        model = train_kge(graph, KgeTrainConfig(scorer="distmult", iterations=400, seed=4))
        history = model.loss_history
        assert np.mean(history[-50:]) < np.mean(history[:50])

    def test_same_seed_same_tables(self):
        graph = family_graph()
        a = train_kge(graph, KgeTrainConfig(iterations=30, seed=9))
        b = train_kge(graph, KgeTrainConfig(iterations=30, seed=9))
        np.testing.assert_array_equal(a.entity_embeddings, b.entity_embeddings)

    def test_single_entity_graph(self):
        with pytest.raises(UsageError):
            train_kge(load_graph([("a", "r", "a")]), KgeTrainConfig(iterations=5))

    def test_link_prediction_needs_triples(self, driving_knowledge):
        with pytest.raises(UsageError):
            evaluate_link_prediction(driving_knowledge.model, driving_knowledge.graph, [])


class TestFilteredRank:
    '''Rank with known triples removed and ties split.'''

    def test_excluded_and_ties(self):
        scores = np.array([0.5, 0.9, 0.5, 0.1])
        assert _filtered_rank(scores, 0, [1]) == 1.5

    def test_strictly_best(self):
        assert _filtered_rank(np.array([0.1, 0.9, 0.3]), 1, []) == 1.0

    def test_exact_translations_rank_first(self):
        graph = load_graph([("a", "r", "b"), ("b", "r", "c")])
        model = KgeModel(entity_embeddings=np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]),
                         relation_embeddings=np.array([[1.0, 0.0]]), scorer=Scorer.TRANSE_L2)
        report = evaluate_link_prediction(model, graph, graph.triples)
        assert report.mrr == 1.0
        assert report.hits_at_1 == 1.0

# -------------------------------------------------------------------------------------------------
# Lookup and persistence
# -------------------------------------------------------------------------------------------------

class TestLookup:
    '''Keyword to entity row.'''

    def test_synonym_and_plural(self, driving_knowledge):
        model, graph, synonyms = driving_knowledge.model, driving_knowledge.graph, driving_knowledge.synonyms
        car = model.entity_embeddings[graph.entities["car"]]
        np.testing.assert_array_equal(lookup_embedding(model, graph, "Sedan", synonyms), car)
        np.testing.assert_array_equal(lookup_embedding(model, graph, "cars", synonyms), car)
        light = model.entity_embeddings[graph.entities["traffic light"]]
        np.testing.assert_array_equal(lookup_embedding(model, graph, "traffic lights", synonyms), light)

    def test_unknown_keyword(self, driving_knowledge):
        assert lookup_embedding(driving_knowledge.model, driving_knowledge.graph, "unicorn",
                                driving_knowledge.synonyms) is None

    def test_synonym_file(self, tmp_path):
        path = tmp_path / "synonyms.tsv"
        path.write_text("# surface\tentity\nAuto\tcar\n", encoding="utf-8")
        table = SynonymTable.from_file(path)
        assert table.normalize("auto") == "car"
        assert table.normalize("Bus") == "bus"


class TestCheckpoint:
    '''save_kge / load_kge / KnowledgeBase.load.'''

    def test_reload(self, tmp_path, driving_knowledge):
        path = save_kge(tmp_path / "kge.tsr", driving_knowledge.model, driving_knowledge.graph)
        model, graph = load_kge(path)
        assert graph.entities == driving_knowledge.graph.entities
        assert graph.triples == driving_knowledge.graph.triples
        assert model.scorer is Scorer.TRANSE_L2
        np.testing.assert_array_equal(model.entity_embeddings, driving_knowledge.model.entity_embeddings)

    def test_knowledge_base_adds_plurals(self, tmp_path, driving_knowledge):
        path = save_kge(tmp_path / "kge.tsr", driving_knowledge.model, driving_knowledge.graph)
        synonyms = tmp_path / "synonyms.tsv"
        synonyms.write_text("lorry\ttruck\n", encoding="utf-8")
        knowledge = KnowledgeBase.load(path, synonyms)
        assert knowledge.synonyms.normalize("lorries") == "truck"
        assert knowledge.synonyms.normalize("buses") == "bus"
