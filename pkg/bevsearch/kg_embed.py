"""
Knowledge graph storage and embedding training
TransE (L1/L2) and DistMult scorers trained against corrupted triples
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .caption_toolkit import pluralize
from .config import KgeTrainConfig
from .errors import DataError, ShapeError, UsageError
from .tensor_core import Tape, Tensor, norm, relu, softplus, take, tsum
from .tensor_io import load_bundle, save_bundle

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

# Tiny driving-domain graph; its entities double as caption keywords
DRIVING_TRIPLES: List[Tuple[str, str, str]] = [
    ("scene", "includes", "car"),
    ("scene", "includes", "truck"),
    ("scene", "includes", "bus"),
    ("scene", "includes", "pedestrian"),
    ("scene", "includes", "bicycle"),
    ("scene", "includes", "motorcycle"),
    ("scene", "includes", "traffic light"),
    ("scene", "includes", "traffic cone"),
    ("scene", "includes", "barrier"),
    ("scene", "includes", "trailer"),
    ("car", "is_a", "vehicle"),
    ("truck", "is_a", "vehicle"),
    ("bus", "is_a", "vehicle"),
    ("trailer", "is_a", "vehicle"),
    ("motorcycle", "is_a", "vehicle"),
    ("bicycle", "is_a", "two wheeler"),
    ("motorcycle", "is_a", "two wheeler"),
    ("pedestrian", "is_a", "road user"),
    ("vehicle", "is_a", "road user"),
    ("traffic light", "is_a", "traffic control"),
    ("traffic cone", "is_a", "obstacle"),
    ("barrier", "is_a", "obstacle"),
    ("traffic light", "located_at", "intersection"),
    ("pedestrian", "uses", "crosswalk"),
    ("crosswalk", "part_of", "intersection"),
    ("bus", "stops_at", "bus stop"),
    ("truck", "tows", "trailer"),
    ("vehicle", "drives_on", "lane"),
    ("lane", "part_of", "intersection"),
]

DRIVING_SYNONYMS: Dict[str, str] = {
    "automobile": "car",
    "sedan": "car",
    "lorry": "truck",
    "ped": "pedestrian",
    "walker": "pedestrian",
    "bike": "bicycle",
    "cyclist": "bicycle",
    "signal": "traffic light",
    "traffic signal": "traffic light",
    "cone": "traffic cone",
    "junction": "intersection",
    "zebra crossing": "crosswalk",
}


class Scorer(str, Enum):
    """Knowledge graph embedding scoring functions"""
    TRANSE_L1 = "transe-l1"
    TRANSE_L2 = "transe-l2"
    DISTMULT = "distmult"

    @property
    def is_transe(self) -> bool:
        return self is not Scorer.DISTMULT

    @property
    def p(self) -> int:
        return 1 if self is Scorer.TRANSE_L1 else 2


class KnowledgeGraph(BaseModel):
    """Entity/relation vocabularies plus a deduplicated triple list"""
    entities: Dict[str, int] = Field(default_factory=dict)
    relations: Dict[str, int] = Field(default_factory=dict)
    triples: List[Triple] = Field(default_factory=list)
    duplicates_dropped: int = 0

    @property
    def entity_names(self) -> List[str]:
        return list(self.entities)

    @property
    def relation_names(self) -> List[str]:
        return list(self.relations)

    def triple_set(self) -> set:
        return set(self.triples)

    def encode(self, head: str, relation: str, tail: str) -> Triple:
        try:
            return self.entities[head], self.relations[relation], self.entities[tail]
        except KeyError as e:
            raise DataError(f"unknown graph name {e.args[0]!r}") from e

    def validate_ids(self, triples: Iterable[Triple]) -> None:
        n_ent, n_rel = len(self.entities), len(self.relations)
        for h, r, t in triples:
            if not (0 <= h < n_ent and 0 <= t < n_ent and 0 <= r < n_rel):
                raise DataError(f"triple {(h, r, t)} references unknown ids")


class KgeModel(BaseModel):
    """Trained entity and relation tables"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    entity_embeddings: np.ndarray
    relation_embeddings: np.ndarray
    scorer: Scorer
    loss_history: List[float] = Field(default_factory=list)

    @property
    def d_kg(self) -> int:
        return int(self.entity_embeddings.shape[1])


class SynonymTable(BaseModel):
    """Surface form -> entity name; lookups are lowercase"""
    mapping: Dict[str, str] = Field(default_factory=dict)

    def normalize(self, surface: str) -> str:
        key = surface.strip().lower()
        return self.mapping.get(key, key)

    def with_plurals(self, entity_names: Iterable[str]) -> "SynonymTable":
        """Add plural surface forms of every entity and of every existing synonym"""
        mapping = dict(self.mapping)
        for name in entity_names:
            mapping.setdefault(pluralize(name, 2), name)
        for surface, name in self.mapping.items():
            mapping.setdefault(pluralize(surface, 2), name)
        return SynonymTable(mapping=mapping)

    @classmethod
    def from_file(cls, path) -> "SynonymTable":
        """surface_form<TAB>entity_name per line, '#' comments"""
        mapping: Dict[str, str] = {}
        for _, fields in _read_tsv(path, 2):
            mapping[fields[0].lower()] = fields[1]
        return cls(mapping=mapping)


class LinkPredictionReport(BaseModel):
    """Filtered ranking metrics over head and tail prediction"""
    mrr: float
    hits_at_1: float
    hits_at_10: float
    head_mrr: float
    tail_mrr: float
    count: int


def _read_tsv(path, columns: int) -> List[Tuple[int, List[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = [field.strip() for field in line.split("\t")]
            if len(fields) != columns:
                raise DataError(f"{path}:{line_no}: expected {columns} tab-separated fields, got {len(fields)}")
            rows.append((line_no, fields))
    return rows


def read_triple_file(path) -> List[Tuple[int, Tuple[str, str, str]]]:
    """head<TAB>relation<TAB>tail per line; returns (line number, triple) pairs"""
    return [(line_no, (f[0], f[1], f[2])) for line_no, f in _read_tsv(path, 3)]


def load_graph(triple_records: Sequence[Tuple[str, str, str]],
               line_numbers: Optional[Sequence[int]] = None) -> KnowledgeGraph:
    """Assign ids in first-appearance order and drop duplicate triples"""
    if not triple_records:
        raise UsageError("knowledge graph needs at least one triple")
    graph = KnowledgeGraph()
    seen = set()
    for index, record in enumerate(triple_records):
        line_no = line_numbers[index] if line_numbers is not None else index + 1
        if len(record) != 3:
            raise DataError(f"line {line_no}: expected (head, relation, tail)")
        head, relation, tail = (str(part).strip() for part in record)
        if not head or not relation or not tail:
            raise DataError(f"line {line_no}: empty component in triple {tuple(record)!r}")
        h = graph.entities.setdefault(head, len(graph.entities))
        r = graph.relations.setdefault(relation, len(graph.relations))
        t = graph.entities.setdefault(tail, len(graph.entities))
        if (h, r, t) in seen:
            graph.duplicates_dropped += 1
            continue
        seen.add((h, r, t))
        graph.triples.append((h, r, t))
    if graph.duplicates_dropped:
        logger.info(f"⚠️ dropped {graph.duplicates_dropped} duplicate triples")
    return graph


def load_graph_file(path) -> KnowledgeGraph:
    rows = read_triple_file(path)
    if not rows:
        raise DataError(f"no triples in {path}")
    return load_graph([triple for _, triple in rows], [line_no for line_no, _ in rows])


def _check_dims(*vectors: np.ndarray) -> None:
    if len({np.shape(v) for v in vectors}) != 1 or np.ndim(vectors[0]) != 1:
        raise ShapeError(f"score vectors must share one dimension, got {[np.shape(v) for v in vectors]}")


def score_transe(h, r, t, p: int = 2) -> float:
    """-||h + r - t||_p"""
    h, r, t = (np.asarray(v, dtype=np.float64) for v in (h, r, t))
    _check_dims(h, r, t)
    if p not in (1, 2):
        raise UsageError(f"TransE norm order must be 1 or 2, got {p}")
    return -float(np.linalg.norm(h + r - t, ord=p))


def score_distmult(h, r, t) -> float:
    """sum_i h_i r_i t_i"""
    h, r, t = (np.asarray(v, dtype=np.float64) for v in (h, r, t))
    _check_dims(h, r, t)
    return float(np.sum(h * r * t))


def _score_batch(entities: Tensor, relations: Tensor, batch: np.ndarray, scorer: Scorer) -> Tensor:
    h = take(entities, batch[:, 0])
    r = take(relations, batch[:, 1])
    t = take(entities, batch[:, 2])
    if scorer.is_transe:
        return -norm(h + r - t, scorer.p, axis=1)
    return tsum(h * r * t, axis=1)


def _corrupt(batch: np.ndarray, per_positive: int, n_entities: int, known: set,
             rng: np.random.Generator, max_tries: int = 50) -> np.ndarray:
    """Replace head or tail (coin flip), rejecting corruptions that are known triples"""
    negatives = np.repeat(batch, per_positive, axis=0)
    for row in negatives:
        h, r, t = (int(x) for x in row)
        for _ in range(max_tries):
            candidate = int(rng.integers(n_entities))
            corrupt_head = bool(rng.integers(2))
            triple = (candidate, r, t) if corrupt_head else (h, r, candidate)
            if triple not in known:
                break
        row[0], row[2] = triple[0], triple[2]
    return negatives


def train_kge(graph: KnowledgeGraph, config: KgeTrainConfig) -> KgeModel:
    """
    Mini-batch SGD over corrupted negatives.

    TransE minimises max(0, margin + f(neg) - f(pos)) and renormalises entity
    rows to unit length after every step; DistMult minimises the logistic
    loss softplus(-f(pos)) + softplus(f(neg)) with an optional L2 penalty.
    """
    if not graph.triples:
        raise UsageError("cannot train embeddings on a graph without triples")
    n_ent, n_rel = len(graph.entities), len(graph.relations)
    if n_ent < 2:
        raise UsageError("graph has a single entity; negatives cannot be sampled")
    scorer = Scorer(config.scorer)
    rng = np.random.default_rng(config.seed)
    dim = config.dim

    if scorer.is_transe:
        bound = 6.0 / np.sqrt(dim)
        ent = rng.uniform(-bound, bound, (n_ent, dim))
        rel = rng.uniform(-bound, bound, (n_rel, dim))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        ent /= np.linalg.norm(ent, axis=1, keepdims=True)
    else:
        ent = rng.normal(0.0, 1.0 / np.sqrt(dim), (n_ent, dim))
        rel = rng.normal(0.0, 1.0 / np.sqrt(dim), (n_rel, dim))
    entities = Tensor.parameter(ent, name="entity_embeddings")
    relations = Tensor.parameter(rel, name="relation_embeddings")

    triples = np.asarray(graph.triples, dtype=np.int64)
    known = graph.triple_set()
    batch_size = min(config.batch_size, len(triples))
    history: List[float] = []

    logger.info(f"🚀 training {scorer.value} on {len(triples)} triples, "
                f"{n_ent} entities, d={dim}, {config.iterations} iterations")
    for step in range(config.iterations):
        batch = triples[rng.choice(len(triples), size=batch_size, replace=False)]
        negatives = _corrupt(batch, config.negatives_per_positive, n_ent, known, rng)
        with Tape() as tape:
            positive = _score_batch(entities, relations, batch, scorer)
            negative = _score_batch(entities, relations, negatives, scorer)
            if scorer.is_transe:
                paired = take(positive, np.repeat(np.arange(batch_size), config.negatives_per_positive))
                loss = relu(config.margin + negative - paired).mean()
            else:
                loss = softplus(-positive).mean() + softplus(negative).mean()
                if config.regularization > 0:
                    loss = loss + config.regularization * ((entities * entities).sum() + (relations * relations).sum())
            tape.backward(loss)
        for table in (entities, relations):
            if table.grad is not None:
                table.data -= config.learning_rate * table.grad
            table.zero_grad()
        if scorer.is_transe:
            entities.data /= np.linalg.norm(entities.data, axis=1, keepdims=True)
        history.append(loss.item())
        if (step + 1) % max(1, config.iterations // 10) == 0:
            logger.info(f"📊 kge step {step + 1}/{config.iterations} loss={history[-1]:.6f}")

    return KgeModel(entity_embeddings=entities.data.copy(), relation_embeddings=relations.data.copy(),
                    scorer=scorer, loss_history=history)


def _candidate_scores(model: KgeModel, h: Optional[int], r: int, t: Optional[int]) -> np.ndarray:
    """Scores for every entity substituted into the missing slot"""
    E, R = model.entity_embeddings, model.relation_embeddings
    if model.scorer.is_transe:
        diff = (E[h] + R[r] - E) if t is None else (E + R[r] - E[t])
        return -np.linalg.norm(diff, ord=model.scorer.p, axis=1)
    if t is None:
        return E @ (E[h] * R[r])
    return E @ (R[r] * E[t])


def _filtered_rank(scores: np.ndarray, true_index: int, excluded: Iterable[int]) -> float:
    keep = np.ones(len(scores), dtype=bool)
    keep[list(excluded)] = False
    keep[true_index] = False
    target = scores[true_index]
    better = int(np.sum(scores[keep] > target))
    ties = int(np.sum(scores[keep] == target))
    return 1.0 + better + ties / 2.0


def evaluate_link_prediction(model: KgeModel, graph: KnowledgeGraph,
                             test: Sequence[Triple]) -> LinkPredictionReport:
    """Filtered head and tail ranking of each test triple among all entities"""
    if not test:
        raise UsageError("link prediction needs at least one test triple")
    graph.validate_ids(test)
    known = graph.triple_set() | set(map(tuple, test))
    tails_of: Dict[Tuple[int, int], List[int]] = {}
    heads_of: Dict[Tuple[int, int], List[int]] = {}
    for h, r, t in known:
        tails_of.setdefault((h, r), []).append(t)
        heads_of.setdefault((r, t), []).append(h)

    head_ranks, tail_ranks = [], []
    for h, r, t in test:
        tail_ranks.append(_filtered_rank(_candidate_scores(model, h, r, None), t, tails_of[(h, r)]))
        head_ranks.append(_filtered_rank(_candidate_scores(model, None, r, t), h, heads_of[(r, t)]))
    ranks = np.asarray(head_ranks + tail_ranks)
    return LinkPredictionReport(
        mrr=float(np.mean(1.0 / ranks)),
        hits_at_1=float(np.mean(ranks <= 1)),
        hits_at_10=float(np.mean(ranks <= 10)),
        head_mrr=float(np.mean(1.0 / np.asarray(head_ranks))),
        tail_mrr=float(np.mean(1.0 / np.asarray(tail_ranks))),
        count=len(test),
    )


def lookup_embedding(model: KgeModel, graph: KnowledgeGraph, keyword: str,
                     synonyms: Optional[SynonymTable] = None) -> Optional[np.ndarray]:
    """Entity row for a keyword after synonym normalisation, or None"""
    name = (synonyms or SynonymTable()).normalize(keyword)
    entity_id = graph.entities.get(name)
    if entity_id is None:
        return None
    return model.entity_embeddings[entity_id].copy()


def save_kge(path, model: KgeModel, graph: KnowledgeGraph) -> Path:
    header = {
        "scorer": model.scorer.value,
        "d_kg": model.d_kg,
        "entities": graph.entity_names,
        "relations": graph.relation_names,
        "triples": [list(t) for t in graph.triples],
    }
    return save_bundle(path, {"entity_embeddings": model.entity_embeddings,
                              "relation_embeddings": model.relation_embeddings}, header)


def load_kge(path) -> Tuple[KgeModel, KnowledgeGraph]:
    tensors, header = load_bundle(path)
    try:
        graph = KnowledgeGraph(
            entities={name: i for i, name in enumerate(header["entities"])},
            relations={name: i for i, name in enumerate(header["relations"])},
            triples=[tuple(t) for t in header["triples"]],
        )
        model = KgeModel(entity_embeddings=tensors["entity_embeddings"],
                         relation_embeddings=tensors["relation_embeddings"],
                         scorer=Scorer(header["scorer"]))
    except (KeyError, ValueError) as e:
        raise DataError(f"malformed KGE checkpoint {path}: {e}") from e
    if model.entity_embeddings.shape[0] != len(graph.entities):
        raise DataError(f"KGE checkpoint {path}: entity table does not match vocabulary")
    return model, graph


def driving_graph() -> Tuple[KnowledgeGraph, SynonymTable]:
    """The built-in driving graph and its synonym table (plural forms included)"""
    graph = load_graph(DRIVING_TRIPLES)
    return graph, SynonymTable(mapping=dict(DRIVING_SYNONYMS)).with_plurals(graph.entity_names)


class KnowledgeBase(BaseModel):
    """Everything the text branch needs for knowledge graph prompting"""
    model: KgeModel
    graph: KnowledgeGraph
    synonyms: SynonymTable = Field(default_factory=SynonymTable)

    @classmethod
    def load(cls, checkpoint, synonyms_path=None) -> "KnowledgeBase":
        model, graph = load_kge(checkpoint)
        synonyms = SynonymTable.from_file(synonyms_path) if synonyms_path else SynonymTable()
        return cls(model=model, graph=graph, synonyms=synonyms.with_plurals(graph.entity_names))
