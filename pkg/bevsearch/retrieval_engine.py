"""
Retrieval engine
Exact cosine top-k over an embedding pool, plus R@K evaluation in both directions
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import DataError, NumericalError, ShapeError, UsageError
from .scene_ingest import PairedCorpus, Split
from .tensor_io import load_bundle, save_bundle

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


class RetrievalIndex(BaseModel):
    """Unit-norm candidate vectors keyed by sample id; immutable once built"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: List[str]
    vectors: np.ndarray
    id_order: np.ndarray

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


class RankedList(BaseModel):
    """Candidates for one query, best first"""
    query_id: str
    ids: List[str]
    scores: List[float]


class RecallReport(BaseModel):
    """R@K for both retrieval directions over one evaluation pool"""
    text_retrieval: Dict[str, float]
    scene_retrieval: Dict[str, float]
    pool_size: int
    checkpoint_hash: Optional[str] = None


def build_index(entries: Iterable[Tuple[str, Sequence[float]]]) -> RetrievalIndex:
    """Normalize and store (id, vector) pairs; insertion order is kept"""
    ids: List[str] = []
    rows: List[np.ndarray] = []
    seen: Set[str] = set()
    for sample_id, vector in entries:
        if sample_id in seen:
            raise DataError(f"duplicate id in index: {sample_id!r}")
        seen.add(sample_id)
        row = np.asarray(vector, dtype=np.float64).reshape(-1)
        if rows and row.shape != rows[0].shape:
            raise ShapeError(f"vector for {sample_id!r} has dimension {row.shape[0]}, expected {rows[0].shape[0]}")
        if not np.all(np.isfinite(row)):
            raise DataError(f"vector for {sample_id!r} contains NaN or Inf")
        length = np.linalg.norm(row)
        if length == 0:
            raise NumericalError(f"zero vector for {sample_id!r} cannot be indexed")
        ids.append(sample_id)
        rows.append(row / length)
    if not ids:
        raise DataError("cannot build an index from zero entries")
    # position of each id in ascending-id order, used as the tie-break key
    id_order = np.empty(len(ids), dtype=np.int64)
    id_order[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return RetrievalIndex(ids=ids, vectors=np.stack(rows), id_order=id_order)


def query_topk(index: RetrievalIndex, query: Sequence[float], k: int, query_id: str = "") -> RankedList:
    """Exact cosine ranking; ties go to the smaller id; returns min(k, count) entries"""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dim:
        raise ShapeError(f"query dimension {query.shape[0]} does not match index dimension {index.dim}")
    length = np.linalg.norm(query)
    if length == 0 or not np.isfinite(length):
        raise NumericalError("query vector has zero or non-finite norm")
    scores = index.vectors @ (query / length)
    order = np.lexsort((index.id_order, -scores))[:min(k, index.count)]
    return RankedList(query_id=query_id, ids=[index.ids[i] for i in order],
                      scores=[float(scores[i]) for i in order])


def recall_at_k(ranked: Sequence[RankedList], truth: Mapping[str, Set[str]],
                ks: Sequence[int] = DEFAULT_KS) -> Dict[int, float]:
    """Fraction of queries with at least one relevant id in their top k"""
    if not ranked:
        raise DataError("recall over zero queries")
    hits = {k: 0 for k in ks}
    for result in ranked:
        if result.query_id not in truth:
            raise DataError(f"query {result.query_id!r} has no ground truth")
        relevant = truth[result.query_id]
        if not relevant:
            raise DataError(f"query {result.query_id!r} has an empty relevant set")
        first = next((rank for rank, candidate in enumerate(result.ids) if candidate in relevant), None)
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
    return {k: hits[k] / len(ranked) for k in ks}


def recall_labels(recall: Mapping[int, float]) -> Dict[str, float]:
    return {f"R@{k}": value for k, value in recall.items()}


def relevance_by_caption(query_ids: Sequence[str], candidate_ids: Sequence[str],
                         captions: Mapping[str, str]) -> Dict[str, Set[str]]:
    """Every candidate sharing the query's caption string is relevant"""
    by_caption: Dict[str, Set[str]] = {}
    for candidate in candidate_ids:
        by_caption.setdefault(captions[candidate], set()).add(candidate)
    return {query: by_caption.get(captions[query], set()) for query in query_ids}


def rank_all(index: RetrievalIndex, query_ids: Sequence[str], queries: np.ndarray, k: int) -> List[RankedList]:
    return [query_topk(index, row, k, query_id=qid) for qid, row in zip(query_ids, queries)]


def evaluate_bidirectional(corpus: PairedCorpus, model, split: Optional[Split] = "validation",
                           ks: Sequence[int] = DEFAULT_KS,
                           checkpoint_hash: Optional[str] = None) -> RecallReport:
    """
    Embed every sample of ``split`` with ``model`` and score both directions.

    text_retrieval: each scene queries the caption pool.
    scene_retrieval: each caption queries the scene pool.
    """
    ids = corpus.ids(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    captions = corpus.caption_of()
    scenes = corpus.scene_map()
    scene_vectors = model.scene_vectors(np.stack([scenes[i].bev_sequence for i in ids]))
    text_vectors = model.text_vectors([captions[i] for i in ids])

    truth = relevance_by_caption(ids, ids, captions)
    depth = max(ks)
    text_pool = build_index(zip(ids, text_vectors))
    scene_pool = build_index(zip(ids, scene_vectors))
    text_retrieval = recall_at_k(rank_all(text_pool, ids, scene_vectors, depth), truth, ks)
    scene_retrieval = recall_at_k(rank_all(scene_pool, ids, text_vectors, depth), truth, ks)
    report = RecallReport(text_retrieval=recall_labels(text_retrieval),
                          scene_retrieval=recall_labels(scene_retrieval),
                          pool_size=len(ids), checkpoint_hash=checkpoint_hash)
    logger.info(f"📊 {split or 'all'} pool of {len(ids)}: text R@1={text_retrieval[ks[0]]:.3f} "
                f"scene R@1={scene_retrieval[ks[0]]:.3f}")
    return report


def save_index(path, index: RetrievalIndex, header: Optional[Dict] = None) -> Path:
    meta = {"ids": index.ids, "dim": index.dim}
    meta.update(header or {})
    return save_bundle(path, {"vectors": index.vectors}, meta)


def load_index(path) -> RetrievalIndex:
    tensors, header = load_bundle(path)
    if "vectors" not in tensors or "ids" not in header:
        raise DataError(f"{path} is not an index bundle")
    vectors = tensors["vectors"]
    if vectors.ndim != 2 or vectors.shape[0] != len(header["ids"]):
        raise DataError(f"index {path}: {len(header['ids'])} ids for vectors of shape {list(vectors.shape)}")
    return build_index(zip(header["ids"], vectors))
