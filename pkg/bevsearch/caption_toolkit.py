"""
Caption construction for retrieval datasets
Easy captions append object quantities, Hard captions append QA pairs
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ValidationError, field_validator

from .errors import DataError, UsageError

logger = logging.getLogger(__name__)

SEPARATOR = ", "

# Count thresholds behind the descriptor vocabulary
SEVERAL_MIN = 2
MANY_MIN = 5

IRREGULAR_PLURALS = {
    "bus": "buses",
    "person": "people",
    "child": "children",
    "man": "men",
    "woman": "women",
    "policeman": "policemen",
    "box": "boxes",
    "lorry": "lorries",
}


class CaptionLevel(str, Enum):
    """Dataset difficulty levels"""
    EASY = "easy"
    HARD = "hard"


class SceneAnnotation(BaseModel):
    """Perception labels and optional QA pairs for one keyframe"""
    sample_id: str
    base_caption: str
    object_counts: List[Tuple[str, int]] = []
    qa_pairs: Optional[List[Tuple[str, str]]] = None

    @field_validator("object_counts", mode="before")
    @classmethod
    def _accept_objects(cls, value: Any) -> Any:
        # {"category": "car", "count": 3} entries are accepted as well as pairs
        if isinstance(value, list):
            return [
                (item["category"], item["count"]) if isinstance(item, dict) else item
                for item in value
            ]
        return value

    @field_validator("object_counts")
    @classmethod
    def _positive_counts(cls, value: List[Tuple[str, int]]) -> List[Tuple[str, int]]:
        for category, count in value:
            if not category.strip():
                raise ValueError("object category must be non-empty")
            if count < 1:
                raise ValueError(f"count for {category!r} must be >= 1, got {count}")
        return value

    @field_validator("qa_pairs", mode="before")
    @classmethod
    def _accept_qa_objects(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [
                (item["question"], item["answer"]) if isinstance(item, dict) else item
                for item in value
            ]
        return value


class CaptionCorpus(BaseModel):
    """Per-sample captions at one level plus the distinct-string count"""
    level: CaptionLevel
    entries: List[Tuple[str, str]]
    distinct_count: int


def quantity_descriptor(count: int) -> str:
    """one / several / many for a positive object count"""
    if count < 1:
        raise UsageError(f"quantity descriptor needs a positive count, got {count}")
    if count < SEVERAL_MIN:
        return "one"
    if count < MANY_MIN:
        return "several"
    return "many"


def pluralize(category: str, count: int) -> str:
    """Plural of the last word when count > 1"""
    if count <= 1:
        return category
    head, _, last = category.rpartition(" ")
    plural = IRREGULAR_PLURALS.get(last, last + "s")
    return f"{head} {plural}" if head else plural


def build_easy_caption(ann: SceneAnnotation) -> str:
    if not ann.object_counts:
        return ann.base_caption
    objects = SEPARATOR.join(
        f"{quantity_descriptor(count)} {pluralize(category, count)}"
        for category, count in ann.object_counts
    )
    return ann.base_caption + SEPARATOR + objects


def build_hard_caption(ann: SceneAnnotation) -> str:
    easy = build_easy_caption(ann)
    if not ann.qa_pairs:
        return easy
    qa = SEPARATOR.join(f"{question} {answer}" for question, answer in ann.qa_pairs)
    return easy + SEPARATOR + qa


def build_corpus_captions(annotations: Sequence[SceneAnnotation], level: CaptionLevel) -> CaptionCorpus:
    level = CaptionLevel(level)
    seen = set()
    for ann in annotations:
        if ann.sample_id in seen:
            raise DataError(f"duplicate sample_id in annotations: {ann.sample_id}")
        seen.add(ann.sample_id)
    build = build_easy_caption if level is CaptionLevel.EASY else build_hard_caption
    entries = [(ann.sample_id, build(ann)) for ann in annotations]
    distinct = len({caption for _, caption in entries})
    logger.info(f"📊 {level.value}: {len(entries)} captions, {distinct} distinct")
    return CaptionCorpus(level=level, entries=entries, distinct_count=distinct)


def load_annotations(path) -> List[SceneAnnotation]:
    """Parse a JSON array of SceneAnnotation objects"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, list):
        raise DataError(f"{path} must hold a JSON array of annotations")
    annotations = []
    for index, item in enumerate(raw):
        try:
            annotations.append(SceneAnnotation.model_validate(item))
        except ValidationError as e:
            raise DataError(f"annotation #{index} in {path} is invalid: {e}") from e
    return annotations


def write_captions_jsonl(path, corpus: CaptionCorpus) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for sample_id, caption in corpus.entries:
            record = {"sample_id": sample_id, "caption": caption, "level": corpus.level.value}
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def caption_stats(corpora: Dict[str, CaptionCorpus]) -> Dict[str, Any]:
    """Dataset statistics with the descriptor thresholds that produced them"""
    return {
        "levels": {name: {"captions": len(c.entries), "distinct": c.distinct_count}
                   for name, c in corpora.items()},
        "descriptor_thresholds": {"one": [1, SEVERAL_MIN - 1],
                                  "several": [SEVERAL_MIN, MANY_MIN - 1],
                                  "many": [MANY_MIN, None]},
        "separator": SEPARATOR,
    }
