"""
Text branch: tokenization, entity linking, knowledge graph prompting, encoding
KGE rows are spliced into the token-embedding sequence after each linked keyword
"""

import hashlib
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr

from .config import TextEncoderConfig
from .errors import DataError, ShapeError, UsageError
from .kg_embed import KgeModel, KnowledgeGraph, SynonymTable
from .tensor_core import Tensor, concat, matmul, take

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]
MAX_NGRAM = 3

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, punctuation as separate tokens"""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary(BaseModel):
    """Token <-> id map with fixed reserved ids"""
    tokens: List[str] = Field(default_factory=list)
    _index: Dict[str, int] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        self._index = {token: i + len(RESERVED) for i, token in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(RESERVED) + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        if 0 <= token_id < len(RESERVED):
            return RESERVED[token_id]
        if token_id - len(RESERVED) >= len(self.tokens) or token_id < 0:
            raise DataError(f"token id {token_id} outside vocabulary of size {len(self)}")
        return self.tokens[token_id - len(RESERVED)]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id_of(token) for token in tokens]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Tokens in first-appearance order over the given texts"""
        seen = {}
        for text in texts:
            for token in tokenize(text):
                seen.setdefault(token, None)
        return cls(tokens=list(seen))

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocabulary file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls(tokens=[line.rstrip("\n") for line in f if line.rstrip("\n")])

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(token + "\n" for token in self.tokens)
        return path

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


class EntityMatch(BaseModel):
    """A linked keyword span; the KGE row is inserted after ``token_position``"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    start: int
    token_position: int
    entity_name: str
    kge_vector: np.ndarray


def link_entities(tokens: Sequence[str], synonyms: SynonymTable, model: KgeModel,
                  graph: KnowledgeGraph, max_ngram: int = MAX_NGRAM) -> List[EntityMatch]:
    """Greedy longest-match left to right over n-grams of up to ``max_ngram`` tokens"""
    matches: List[EntityMatch] = []
    i = 0
    while i < len(tokens):
        for n in range(min(max_ngram, len(tokens) - i), 0, -1):
            name = synonyms.normalize(" ".join(tokens[i:i + n]))
            entity_id = graph.entities.get(name)
            if entity_id is not None:
                matches.append(EntityMatch(start=i, token_position=i + n - 1, entity_name=name,
                                           kge_vector=model.entity_embeddings[entity_id]))
                i += n
                break
        else:
            i += 1
    return matches


class TextEncoderParams:
    """Trainable tables of the desk text encoder"""

    def __init__(self, token_embedding: Tensor, output_projection: Tensor,
                 kge_projection: Optional[Tensor] = None):
        self.token_embedding = token_embedding
        self.output_projection = output_projection
        self.kge_projection = kge_projection
        if output_projection.shape[0] != token_embedding.shape[1]:
            raise ShapeError("output_projection rows must equal the token embedding width")
        if kge_projection is not None and kge_projection.shape[1] != token_embedding.shape[1]:
            raise ShapeError("kge_projection columns must equal the token embedding width")

    @classmethod
    def init(cls, vocab_size: int, config: TextEncoderConfig, d_kg: Optional[int],
             rng: np.random.Generator) -> "TextEncoderParams":
        d_tok, d_lang = config.d_tok, config.d_lang
        token_embedding = rng.normal(0.0, 1.0, (vocab_size, d_tok))
        output_projection = rng.normal(0.0, 1.0 / np.sqrt(d_tok), (d_tok, d_lang))
        kge_projection = None
        if d_kg is not None:
            kge_projection = Tensor.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_kg), (d_kg, d_tok)),
                                              name="kge_projection")
        return cls(Tensor.parameter(token_embedding, name="token_embedding"),
                   Tensor.parameter(output_projection, name="output_projection"),
                   kge_projection)

    def parameters(self) -> List[Tensor]:
        params = [self.token_embedding, self.output_projection]
        if self.kge_projection is not None:
            params.append(self.kge_projection)
        return params

    @property
    def d_lang(self) -> int:
        return int(self.output_projection.shape[1])


class TextEncoding:
    """Per-position language embeddings and their mean"""

    def __init__(self, sequence: Tensor, pooled: Tensor):
        self.sequence = sequence
        self.pooled = pooled


def fuse_kgp(token_embeds: Tensor, matches: Sequence[EntityMatch], params: TextEncoderParams) -> Tensor:
    """Insert each projected KGE row right after its anchor token, in occurrence order"""
    if not matches:
        return token_embeds
    length = token_embeds.shape[0]
    for match in matches:
        if not 0 <= match.token_position < length:
            raise DataError(f"entity match position {match.token_position} outside sequence of length {length}")
    if params.kge_projection is None:
        raise UsageError("text encoder was built without a KGE projection")
    kge_rows = Tensor(np.stack([match.kge_vector for match in matches]))
    projected = matmul(kge_rows, params.kge_projection)
    anchors = {}
    for j, match in enumerate(matches):
        anchors.setdefault(match.token_position, []).append(length + j)
    order: List[int] = []
    for i in range(length):
        order.append(i)
        order.extend(anchors.get(i, []))
    return take(concat([token_embeds, projected], axis=0), order)


def encode_text(fused: Tensor, params: TextEncoderParams) -> TextEncoding:
    """Per-position output projection followed by mean pooling"""
    if fused.ndim != 2 or fused.shape[0] == 0:
        raise UsageError("encode_text needs a non-empty [positions x d_tok] sequence")
    sequence = matmul(fused, params.output_projection)
    return TextEncoding(sequence, sequence.mean(axis=0))


class TextPipeline:
    """
    Caption -> language embedding sequence.

    Holds the vocabulary and, when knowledge graph prompting is on, the KGE
    tables, graph and synonym table used to link keywords.
    """

    def __init__(self, vocab: Vocabulary, params: TextEncoderParams,
                 kge: Optional[KgeModel] = None, graph: Optional[KnowledgeGraph] = None,
                 synonyms: Optional[SynonymTable] = None, use_kgp: bool = True):
        self.vocab = vocab
        self.params = params
        self.kge = kge
        self.graph = graph
        self.synonyms = synonyms or SynonymTable()
        self.use_kgp = use_kgp and kge is not None and graph is not None

    def token_ids(self, caption: str) -> List[int]:
        return self.vocab.encode(tokenize(caption))

    def matches(self, tokens: Sequence[str]) -> List[EntityMatch]:
        if not self.use_kgp:
            return []
        return link_entities(tokens, self.synonyms, self.kge, self.graph)

    def encode(self, caption: str) -> TextEncoding:
        tokens = tokenize(caption)
        if not tokens:
            raise DataError(f"caption has no tokens: {caption!r}")
        token_embeds = take(self.params.token_embedding, self.vocab.encode(tokens))
        fused = fuse_kgp(token_embeds, self.matches(tokens), self.params)
        return encode_text(fused, self.params)
