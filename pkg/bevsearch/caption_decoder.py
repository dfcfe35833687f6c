"""
Lightweight caption decoder
One causal self-attention block, one cross-attention block over the scene memory,
a feed-forward block and a vocabulary head; teacher-forced
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from .config import DecoderConfig
from .errors import DataError, ShapeError
from .tensor_core import (MASK_VALUE, Tensor, cross_entropy_logits, matmul, relu,
                          reshape, softmax, take, transpose)
from .text_pipeline import BOS, EOS, PAD

logger = logging.getLogger(__name__)


class CaptionDecoderParams:
    """Trainable weights of the caption decoder"""

    NAMES = ("token_embedding", "position_embedding",
             "self_q", "self_k", "self_v", "self_o",
             "cross_q", "cross_k", "cross_v", "cross_o",
             "ffn_in", "ffn_in_bias", "ffn_out", "ffn_out_bias",
             "vocab_head", "vocab_bias")

    def __init__(self, **tensors: Tensor):
        missing = [name for name in self.NAMES if name not in tensors]
        if missing:
            raise ShapeError(f"decoder weights missing: {missing}")
        for name in self.NAMES:
            setattr(self, name, tensors[name])

    @classmethod
    def init(cls, vocab_size: int, d_model: int, config: DecoderConfig,
             rng: np.random.Generator) -> "CaptionDecoderParams":
        def dense(fan_in: int, fan_out: int) -> np.ndarray:
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))

        d, d_ff = d_model, config.d_ff
        weights = {
            "token_embedding": rng.normal(0.0, 1.0 / np.sqrt(d), (vocab_size, d)),
            "position_embedding": rng.normal(0.0, 1.0 / np.sqrt(d), (config.max_tokens, d)),
            "self_q": dense(d, d), "self_k": dense(d, d), "self_v": dense(d, d), "self_o": dense(d, d),
            "cross_q": dense(d, d), "cross_k": dense(d, d), "cross_v": dense(d, d), "cross_o": dense(d, d),
            "ffn_in": dense(d, d_ff), "ffn_in_bias": np.zeros(d_ff),
            "ffn_out": dense(d_ff, d), "ffn_out_bias": np.zeros(d),
            "vocab_head": dense(d, vocab_size), "vocab_bias": np.zeros(vocab_size),
        }
        return cls(**{name: Tensor.parameter(value, name=f"decoder.{name}") for name, value in weights.items()})

    def parameters(self) -> List[Tensor]:
        return [getattr(self, name) for name in self.NAMES]

    @property
    def vocab_size(self) -> int:
        return int(self.vocab_head.shape[1])

    @property
    def max_tokens(self) -> int:
        return int(self.position_embedding.shape[0])


def _causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = MASK_VALUE
    return mask


def _attend(query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
    scores = matmul(query, transpose(key)) * (1.0 / np.sqrt(query.shape[-1]))
    if mask is not None:
        scores = scores + mask
    return matmul(softmax(scores, axis=-1), value)


def decode_batch(decoder: CaptionDecoderParams, memory: Tensor, token_ids: np.ndarray) -> Tensor:
    """Logits [N x L x V] for prefixes [N x L] attending to memory [N x k x d]"""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 2 or memory.ndim != 3 or memory.shape[0] != token_ids.shape[0]:
        raise ShapeError(f"decoder needs ids [N x L] and memory [N x k x d], "
                         f"got {list(token_ids.shape)} and {list(memory.shape)}")
    batch, length = token_ids.shape
    if length > decoder.max_tokens:
        raise ShapeError(f"prefix of length {length} exceeds decoder limit {decoder.max_tokens}")
    if token_ids.min() < 0 or token_ids.max() >= decoder.vocab_size:
        raise DataError(f"token id outside decoder vocabulary of size {decoder.vocab_size}")
    d = decoder.token_embedding.shape[1]

    x = reshape(take(decoder.token_embedding, token_ids.reshape(-1)), (batch, length, d))
    x = x + take(decoder.position_embedding, np.arange(length))

    x = x + matmul(_attend(matmul(x, decoder.self_q), matmul(x, decoder.self_k),
                           matmul(x, decoder.self_v), _causal_mask(length)), decoder.self_o)
    x = x + matmul(_attend(matmul(x, decoder.cross_q), matmul(memory, decoder.cross_k),
                           matmul(memory, decoder.cross_v)), decoder.cross_o)
    hidden = relu(matmul(x, decoder.ffn_in) + decoder.ffn_in_bias)
    x = x + matmul(hidden, decoder.ffn_out) + decoder.ffn_out_bias
    return matmul(x, decoder.vocab_head) + decoder.vocab_bias


def caption_logits(decoder: CaptionDecoderParams, reprojected_bev: Tensor,
                   target_prefix: Sequence[int]) -> Tensor:
    """Teacher-forced logits [len x V] for one prefix that starts with BOS"""
    prefix = np.asarray(target_prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.size == 0 or prefix[0] != BOS:
        raise DataError("caption prefix must be a non-empty id sequence starting with BOS")
    if reprojected_bev.ndim != 2:
        raise ShapeError(f"scene memory must be [k x d], got {list(reprojected_bev.shape)}")
    memory = reshape(reprojected_bev, (1,) + reprojected_bev.shape)
    logits = decode_batch(decoder, memory, prefix.reshape(1, -1))
    return reshape(logits, logits.shape[1:])


def cg_loss(logits: Tensor, target_tokens) -> Tensor:
    """Next-token cross entropy; PAD targets are skipped"""
    targets = np.asarray(target_tokens, dtype=np.int64).reshape(-1)
    flat = reshape(logits, (-1, logits.shape[-1]))
    return cross_entropy_logits(flat, targets, ignore_index=PAD)


def teacher_forcing_batch(captions: Sequence[Sequence[int]], max_tokens: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inputs [BOS, w1..wn] and targets [w1..wn, EOS], PAD-filled to a common length.

    Captions longer than ``max_tokens - 1`` are truncated with a warning.
    """
    limit = max_tokens - 1
    truncated = sum(1 for ids in captions if len(ids) > limit)
    if truncated:
        logger.warning(f"⚠️ {truncated}/{len(captions)} captions exceed {limit} tokens; "
                       f"caption loss only sees their first {limit}")
    rows = [list(ids)[:limit] for ids in captions]
    length = max(len(ids) for ids in rows) + 1
    inputs = np.full((len(rows), length), PAD, dtype=np.int64)
    targets = np.full((len(rows), length), PAD, dtype=np.int64)
    for i, ids in enumerate(rows):
        inputs[i, :len(ids) + 1] = [BOS] + ids
        targets[i, :len(ids) + 1] = ids + [EOS]
    return inputs, targets
