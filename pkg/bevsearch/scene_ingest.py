"""
Scene ingestion and synthetic corpora
BEV feature sequences come from an external encoder through the TSR1 container
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .caption_toolkit import SceneAnnotation, build_easy_caption
from .config import SynthSpec
from .errors import DataError, UsageError
from .tensor_io import load_bundle, save_bundle

logger = logging.getLogger(__name__)

Split = Literal["train", "validation"]

SCENES_FILE = "scenes.tsr"
CAPTIONS_FILE = "captions.jsonl"

ACTIONS = [
    "arrive at intersection",
    "turn left at intersection",
    "turn right at intersection",
    "wait at red traffic light",
    "drive straight on highway",
    "change lane to the left",
    "stop for pedestrian at crosswalk",
    "park near bus stop",
    "overtake slow truck",
    "merge into traffic",
]

OBJECT_POOL = ["car", "truck", "bus", "pedestrian", "bicycle", "motorcycle",
               "traffic cone", "barrier", "trailer"]


class SceneRecord(BaseModel):
    """One sample's BEV feature sequence [n x d_b]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    bev_sequence: np.ndarray

    @field_validator("bev_sequence")
    @classmethod
    def _matrix(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        # (n, 1, d_b) style layouts collapse to (n, d_b)
        while value.ndim > 2 and 1 in value.shape:
            value = np.squeeze(value, axis=value.shape.index(1))
        if value.ndim != 2 or value.shape[0] < 1 or value.shape[1] < 1:
            raise ValueError(f"BEV sequence must be [n x d_b] with n >= 1, got {list(value.shape)}")
        if not np.all(np.isfinite(value)):
            raise ValueError("BEV sequence contains NaN or Inf")
        return value

    @property
    def n(self) -> int:
        return int(self.bev_sequence.shape[0])

    @property
    def d_b(self) -> int:
        return int(self.bev_sequence.shape[1])


class PairedCorpus(BaseModel):
    """Scenes and captions paired one-to-one by sample id, with a train/validation split"""
    scenes: List[SceneRecord]
    texts: List[Tuple[str, str]]
    split: Dict[str, Split]

    @model_validator(mode="after")
    def _bijection(self) -> "PairedCorpus":
        scene_ids = [s.sample_id for s in self.scenes]
        text_ids = [sample_id for sample_id, _ in self.texts]
        if len(set(scene_ids)) != len(scene_ids):
            raise ValueError("duplicate scene sample ids")
        if len(set(text_ids)) != len(text_ids):
            raise ValueError("duplicate text sample ids")
        if set(scene_ids) != set(text_ids):
            missing = sorted(set(scene_ids) ^ set(text_ids))[:5]
            raise ValueError(f"scenes and texts do not pair up; unmatched ids: {missing}")
        if set(self.split) != set(scene_ids):
            raise ValueError("every sample needs exactly one split assignment")
        return self

    def caption_of(self) -> Dict[str, str]:
        return dict(self.texts)

    def ids(self, split: Optional[Split] = None) -> List[str]:
        return [s.sample_id for s in self.scenes if split is None or self.split[s.sample_id] == split]

    def scene_map(self) -> Dict[str, SceneRecord]:
        return {s.sample_id: s for s in self.scenes}


def load_bev_features(path) -> List[SceneRecord]:
    """Read a TSR1 feature container; every sample must share one shape"""
    tensors, _ = load_bundle(path)
    records: List[SceneRecord] = []
    shape = None
    for sample_id, array in tensors.items():
        if not np.all(np.isfinite(array)):
            raise DataError(f"sample {sample_id!r} in {path} contains NaN or Inf")
        try:
            record = SceneRecord(sample_id=sample_id, bev_sequence=array)
        except ValueError as e:
            raise DataError(f"sample {sample_id!r} in {path}: {e}") from e
        if shape is None:
            shape = record.bev_sequence.shape
        elif record.bev_sequence.shape != shape:
            raise DataError(f"sample {sample_id!r} has shape {list(record.bev_sequence.shape)}, "
                            f"expected {list(shape)}")
        records.append(record)
    logger.info(f"✅ loaded {len(records)} BEV sequences from {path}")
    return records


def save_bev_features(path, scenes: List[SceneRecord]) -> Path:
    header = {"count": len(scenes)}
    if scenes:
        header.update({"n": scenes[0].n, "d_b": scenes[0].d_b})
    return save_bundle(path, {s.sample_id: s.bev_sequence for s in scenes}, header)


def _class_captions(num_classes: int, rng: np.random.Generator, max_attempts: int = 100000) -> List[str]:
    captions: List[str] = []
    seen = set()
    for _ in range(max_attempts):
        if len(captions) == num_classes:
            return captions
        action = ACTIONS[int(rng.integers(len(ACTIONS)))]
        picks = rng.choice(len(OBJECT_POOL), size=2, replace=False)
        counts = [(OBJECT_POOL[int(i)], int(rng.integers(1, 8))) for i in picks]
        caption = build_easy_caption(SceneAnnotation(sample_id="", base_caption=action, object_counts=counts))
        if caption not in seen:
            seen.add(caption)
            captions.append(caption)
    raise UsageError(f"could not generate {num_classes} distinct captions")


def synth_corpus(spec: SynthSpec) -> PairedCorpus:
    """
    Class prototypes plus Gaussian noise, one distinct caption per class.

    Captions are built from the driving keyword pool so knowledge graph
    prompting has keywords to link. The last ``validation_per_class``
    samples of every class form the validation split.
    """
    rng = np.random.default_rng(spec.seed)
    captions = _class_captions(spec.num_classes, rng)
    scenes: List[SceneRecord] = []
    texts: List[Tuple[str, str]] = []
    split: Dict[str, Split] = {}
    for c in range(spec.num_classes):
        prototype = rng.normal(0.0, 1.0, (spec.n, spec.d_b))
        for s in range(spec.samples_per_class):
            sample_id = f"c{c:03d}_s{s:03d}"
            noise = rng.normal(0.0, 1.0, (spec.n, spec.d_b)) * spec.noise_sigma
            scenes.append(SceneRecord(sample_id=sample_id, bev_sequence=prototype + noise))
            texts.append((sample_id, captions[c]))
            in_validation = s >= spec.samples_per_class - spec.validation_per_class
            split[sample_id] = "validation" if in_validation else "train"
    logger.info(f"✅ synthesized {len(scenes)} samples over {spec.num_classes} classes")
    return PairedCorpus(scenes=scenes, texts=texts, split=split)


def save_corpus(directory, corpus: PairedCorpus) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_bev_features(directory / SCENES_FILE, corpus.scenes)
    with open(directory / CAPTIONS_FILE, "w", encoding="utf-8") as f:
        for sample_id, caption in corpus.texts:
            record = {"sample_id": sample_id, "caption": caption, "split": corpus.split[sample_id]}
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return directory


def load_corpus(directory) -> PairedCorpus:
    """scenes.tsr (+ sidecar) and captions.jsonl with sample_id/caption/split"""
    directory = Path(directory)
    captions_path = directory / CAPTIONS_FILE
    if not captions_path.exists():
        raise DataError(f"captions file not found: {captions_path}")
    scenes = load_bev_features(directory / SCENES_FILE)
    texts: List[Tuple[str, str]] = []
    split: Dict[str, Split] = {}
    with open(captions_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                texts.append((record["sample_id"], record["caption"]))
                split[record["sample_id"]] = record.get("split", "train")
            except (json.JSONDecodeError, KeyError) as e:
                raise DataError(f"{captions_path}:{line_no}: bad caption record: {e}") from e
    try:
        return PairedCorpus(scenes=scenes, texts=texts, split=split)
    except ValueError as e:
        raise DataError(f"corpus in {directory} is inconsistent: {e}") from e
