"""
Shared pytest fixtures for bevsearch
"""

import numpy as np
import pytest

from bevsearch.config import AlignTrainConfig, DecoderConfig, KgeTrainConfig, SynthSpec, TextEncoderConfig
from bevsearch.kg_embed import KgeModel, KnowledgeBase, Scorer, driving_graph, train_kge
from bevsearch.scene_ingest import synth_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    '''8 classes x 3 samples: 2 train + 1 validation per class.'''
    return SynthSpec(num_classes=8, samples_per_class=3, n=6, d_b=32, noise_sigma=0.05,
                     validation_per_class=1, seed=7)


@pytest.fixture
def small_corpus(small_spec):
    return synth_corpus(small_spec)


@pytest.fixture
def small_config():
    '''Reduced widths that keep a training epoch well under a second.'''
    return AlignTrainConfig(batch_size=8, epochs=3, optimizer="adamw", learning_rate=0.01,
                            k=8, d_c=16, text=TextEncoderConfig(d_tok=16, d_lang=16),
                            decoder=DecoderConfig(d_ff=32, max_tokens=32), seed=3)


@pytest.fixture
def driving_knowledge():
    '''Random (untrained) embeddings over the built-in driving graph.'''
    graph, synonyms = driving_graph()
    gen = np.random.default_rng(5)
    model = KgeModel(entity_embeddings=gen.normal(size=(len(graph.entities), 8)),
                     relation_embeddings=gen.normal(size=(len(graph.relations), 8)),
                     scorer=Scorer.TRANSE_L2)
    return KnowledgeBase(model=model, graph=graph, synonyms=synonyms)


@pytest.fixture(scope="session")
def separable_corpus():
    '''32 classes x 8 samples, one validation sample per class.'''
    return synth_corpus(SynthSpec(num_classes=32, samples_per_class=8, noise_sigma=0.05, seed=0))


@pytest.fixture(scope="session")
def trained_driving_knowledge():
    '''TransE embeddings of the built-in driving graph, so linked keywords carry structure.'''
    graph, synonyms = driving_graph()
    model = train_kge(graph, KgeTrainConfig(iterations=2000, seed=0))
    return KnowledgeBase(model=model, graph=graph, synonyms=synonyms)
