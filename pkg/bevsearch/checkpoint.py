"""
Alignment checkpoints
Every trainable tensor in one TSR1 bundle; config, vocabulary and KGE graph in the sidecar
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .caption_decoder import CaptionDecoderParams
from .config import AlignTrainConfig
from .errors import DataError
from .kg_embed import KgeModel, KnowledgeBase, KnowledgeGraph, Scorer, SynonymTable
from .run_audit import auditor
from .sce_align import AlignmentModel, SceParams
from .tensor_core import Tensor
from .tensor_io import load_bundle, save_bundle, sidecar_path
from .text_pipeline import TextEncoderParams, TextPipeline, Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "bevsearch-align"


def save_model(path, model: AlignmentModel, knowledge: Optional[KnowledgeBase] = None) -> Path:
    tensors: Dict[str, np.ndarray] = {name: p.data for name, p in model.named_parameters().items()}
    header = {
        "kind": CHECKPOINT_KIND,
        "config": model.config.model_dump(mode="json"),
        "dims": {"k": model.sce.k, "d_c": model.sce.d_c,
                 "d_b": int(model.sce.bev_projection.shape[0]), "d_lang": model.text.params.d_lang,
                 "vocab_size": len(model.vocab)},
        "temperature": model.sce.temperature,
        "lambda_cg": model.sce.lambda_cg,
        "vocab": model.vocab.tokens,
        "vocab_hash": model.vocab.digest(),
        "kge": None,
    }
    if knowledge is not None and model.text.use_kgp:
        tensors["kge.entity_embeddings"] = knowledge.model.entity_embeddings
        tensors["kge.relation_embeddings"] = knowledge.model.relation_embeddings
        header["kge"] = {
            "scorer": knowledge.model.scorer.value,
            "entities": knowledge.graph.entity_names,
            "relations": knowledge.graph.relation_names,
            "triples": [list(t) for t in knowledge.graph.triples],
            "synonyms": dict(sorted(knowledge.synonyms.mapping.items())),
        }
    save_bundle(path, tensors, header)
    logger.info(f"✅ checkpoint saved: {path} ({len(tensors)} tensors)")
    return Path(path)


def _knowledge_from(header: Dict, tensors: Dict[str, np.ndarray]) -> KnowledgeBase:
    kge = header["kge"]
    graph = KnowledgeGraph(entities={name: i for i, name in enumerate(kge["entities"])},
                           relations={name: i for i, name in enumerate(kge["relations"])},
                           triples=[tuple(t) for t in kge["triples"]])
    model = KgeModel(entity_embeddings=tensors["kge.entity_embeddings"],
                     relation_embeddings=tensors["kge.relation_embeddings"],
                     scorer=Scorer(kge["scorer"]))
    return KnowledgeBase(model=model, graph=graph, synonyms=SynonymTable(mapping=kge["synonyms"]))


def load_model(path) -> Tuple[AlignmentModel, Optional[KnowledgeBase]]:
    tensors, header = load_bundle(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path} is not an alignment checkpoint")
    try:
        config = AlignTrainConfig.model_validate(header["config"])
        vocab = Vocabulary(tokens=header["vocab"])
        knowledge = _knowledge_from(header, tensors) if header.get("kge") else None

        def param(name: str) -> Tensor:
            return Tensor.parameter(tensors[name], name=name)

        text_params = TextEncoderParams(param("text.token_embedding"), param("text.output_projection"),
                                        param("text.kge_projection") if "text.kge_projection" in tensors else None)
        decoder = CaptionDecoderParams(**{name: param(f"decoder.{name}") for name in CaptionDecoderParams.NAMES})
        mapped = "sce.bev_mapping" in tensors
        sce = SceParams(param("sce.shared_embeddings"), param("sce.bev_projection"), param("sce.text_projection"),
                        decoder, header["temperature"], header["lambda_cg"],
                        param("sce.bev_mapping") if mapped else None,
                        param("sce.text_mapping") if mapped else None)
    except (KeyError, TypeError, ValidationError) as e:
        raise DataError(f"malformed checkpoint {path}: {e}") from e
    if vocab.digest() != header.get("vocab_hash"):
        raise DataError(f"checkpoint {path}: vocabulary hash mismatch")
    if len(vocab) != text_params.token_embedding.shape[0]:
        raise DataError(f"checkpoint {path}: vocabulary size does not match token embedding rows")
    pipeline = TextPipeline(vocab, text_params,
                            kge=knowledge.model if knowledge else None,
                            graph=knowledge.graph if knowledge else None,
                            synonyms=knowledge.synonyms if knowledge else None,
                            use_kgp=config.use_kgp)
    return AlignmentModel(config, vocab, pipeline, sce), knowledge


def checkpoint_hash(path) -> str:
    """One digest over the tensor file and its sidecar"""
    path = Path(path)
    return auditor.hash_payload({"tensors": auditor.hash_file(path),
                                 "sidecar": auditor.hash_file(sidecar_path(path))})
