"""
Ablation runs
Module grid (codebook, graph prompting, caption loss) and single-parameter sweeps
"""

import logging
from typing import Any, Dict, List, Optional, Tuple

from .config import AlignTrainConfig
from .errors import UsageError
from .kg_embed import KnowledgeBase
from .retrieval_engine import evaluate_bidirectional
from .scene_ingest import PairedCorpus
from .sce_align import train_align

logger = logging.getLogger(__name__)

# Each row switches on one more module than the row before it
MODULE_GRID: List[Tuple[str, Dict[str, bool]]] = [
    ("baseline", {"use_sce": False, "use_kgp": False, "use_cg": False}),
    ("+SCE", {"use_sce": True, "use_kgp": False, "use_cg": False}),
    ("+SCE+KGP", {"use_sce": True, "use_kgp": True, "use_cg": False}),
    ("+SCE+KGP+CG", {"use_sce": True, "use_kgp": True, "use_cg": True}),
]

SWEEPABLE = {"k": int, "d_c": int, "lambda_cg": float, "temperature": float, "batch_size": int}


def parse_sweep(text: str) -> Tuple[str, List[Any]]:
    """'k=4,8,16' -> ('k', [4, 8, 16])"""
    name, sep, values = text.partition("=")
    name = name.strip()
    if not sep or name not in SWEEPABLE:
        raise UsageError(f"sweep must look like NAME=v1,v2 with NAME in {sorted(SWEEPABLE)}, got {text!r}")
    try:
        parsed = [SWEEPABLE[name](v) for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad sweep value in {text!r}: {e}") from e
    if not parsed:
        raise UsageError(f"sweep {text!r} lists no values")
    return name, parsed


def _train_and_score(corpus: PairedCorpus, knowledge: Optional[KnowledgeBase],
                     config: AlignTrainConfig) -> Dict[str, Any]:
    result = train_align(corpus, knowledge, config)
    report = evaluate_bidirectional(corpus, result.model)
    return {
        "text_retrieval": report.text_retrieval,
        "scene_retrieval": report.scene_retrieval,
        "final_loss": result.final.total,
    }


def run_module_grid(corpus: PairedCorpus, knowledge: Optional[KnowledgeBase],
                    base: AlignTrainConfig) -> List[Dict[str, Any]]:
    rows = []
    for label, switches in MODULE_GRID:
        if switches["use_kgp"] and knowledge is None:
            logger.warning(f"⚠️ {label}: no knowledge graph given, graph prompting stays off")
        config = base.model_copy(update=switches)
        logger.info(f"🚀 ablation row {label}")
        rows.append({"row": label, **switches, **_train_and_score(corpus, knowledge, config)})
    return rows


def run_sweep(corpus: PairedCorpus, knowledge: Optional[KnowledgeBase], base: AlignTrainConfig,
              name: str, values: List[Any]) -> List[Dict[str, Any]]:
    rows = []
    for value in values:
        try:
            config = AlignTrainConfig.model_validate({**base.model_dump(), name: value})
        except ValueError as e:
            raise UsageError(f"sweep value {name}={value} is invalid: {e}") from e
        logger.info(f"🚀 sweep {name}={value}")
        rows.append({name: value, **_train_and_score(corpus, knowledge, config)})
    return rows
