"""
bevsearch
Text-to-scene retrieval over bird's-eye-view features with knowledge graph prompting
"""

from .caption_toolkit import (CaptionLevel, SceneAnnotation, build_corpus_captions,
                              build_easy_caption, build_hard_caption, quantity_descriptor)
from .checkpoint import load_model, save_model
from .config import AlignTrainConfig, KgeTrainConfig, SynthSpec
from .errors import BevSearchError, DataError, NumericalError, ShapeError, UsageError
from .kg_embed import (KnowledgeBase, KnowledgeGraph, KgeModel, evaluate_link_prediction,
                       load_graph, lookup_embedding, score_distmult, score_transe, train_kge)
from .retrieval_engine import (RankedList, RetrievalIndex, build_index, evaluate_bidirectional,
                               query_topk, recall_at_k)
from .sce_align import (AlignmentModel, contrastive_loss, sce_reproject, total_loss,
                        train_align)
from .caption_decoder import caption_logits, cg_loss
from .scene_ingest import PairedCorpus, load_bev_features, synth_corpus
from .text_pipeline import TextPipeline, Vocabulary, encode_text, fuse_kgp, link_entities, tokenize

__all__ = [
    'AlignTrainConfig',
    'AlignmentModel',
    'BevSearchError',
    'CaptionLevel',
    'DataError',
    'KgeModel',
    'KgeTrainConfig',
    'KnowledgeBase',
    'KnowledgeGraph',
    'NumericalError',
    'PairedCorpus',
    'RankedList',
    'RetrievalIndex',
    'SceneAnnotation',
    'ShapeError',
    'SynthSpec',
    'TextPipeline',
    'UsageError',
    'Vocabulary',
    'build_corpus_captions',
    'build_easy_caption',
    'build_hard_caption',
    'build_index',
    'caption_logits',
    'cg_loss',
    'contrastive_loss',
    'encode_text',
    'evaluate_bidirectional',
    'evaluate_link_prediction',
    'fuse_kgp',
    'link_entities',
    'load_bev_features',
    'load_graph',
    'load_model',
    'lookup_embedding',
    'quantity_descriptor',
    'query_topk',
    'recall_at_k',
    'save_model',
    'sce_reproject',
    'score_distmult',
    'score_transe',
    'synth_corpus',
    'tokenize',
    'total_loss',
    'train_align',
    'train_kge',
]
