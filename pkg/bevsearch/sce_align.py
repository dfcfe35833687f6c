"""
Shared cross-modal embedding alignment
Codebook reprojection, symmetric contrastive loss, caption-generation loss,
and the mini-batch training loop that combines them
"""

import logging
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .caption_decoder import CaptionDecoderParams, cg_loss, decode_batch, teacher_forcing_batch
from .config import AlignTrainConfig
from .errors import DataError, NumericalError, ShapeError, UsageError
from .kg_embed import KnowledgeBase
from .scene_ingest import PairedCorpus
from .tensor_core import (Tape, Tensor, as_tensor, check_finite, cosine_matrix, cross_entropy_logits,
                          matmul, reshape, softmax, stack_rows, tanh, tmax, transpose)
from .text_pipeline import TextEncoderParams, TextPipeline, Vocabulary

logger = logging.getLogger(__name__)


class Reprojection:
    """Codebook weights w, weighted rows w_i c_i, and their sum"""

    def __init__(self, weights: Tensor, reprojected: Tensor, pooled: Tensor):
        self.weights = weights
        self.reprojected = reprojected
        self.pooled = pooled


class ContrastiveLosses:
    """Text-to-scene and scene-to-text terms and their sum"""

    def __init__(self, t2s: Tensor, s2t: Tensor):
        self.t2s = t2s
        self.s2t = s2t
        self.sce = t2s + s2t


def sce_reproject(sequence: Tensor, shared: Tensor) -> Reprojection:
    """
    Summarise a projected sequence [.. x m x d_c] with the codebook C [k x d_c].

    s_ij = cos(c_i, row_j); r_i = max_j s_ij; w = softmax(r);
    reprojected row i = w_i c_i; pooled = sum_i w_i c_i.
    """
    sequence, shared = as_tensor(sequence), as_tensor(shared)
    if sequence.ndim < 2 or sequence.shape[-2] < 1:
        raise ShapeError(f"sequence must be [.. x m x d_c] with m >= 1, got {list(sequence.shape)}")
    if shared.ndim != 2 or shared.shape[0] < 1 or shared.shape[1] != sequence.shape[-1]:
        raise ShapeError(f"codebook {list(shared.shape)} does not match sequence width {sequence.shape[-1]}")
    similarity = cosine_matrix(shared, sequence)
    weights = softmax(tmax(similarity, axis=-1), axis=-1)
    reprojected = reshape(weights, weights.shape + (1,)) * shared
    if weights.ndim == 1:
        pooled = reshape(matmul(reshape(weights, (1, -1)), shared), (-1,))
    else:
        pooled = matmul(weights, shared)
    return Reprojection(weights, reprojected, pooled)


def contrastive_loss(bev_pooled: Tensor, text_pooled: Tensor, temperature: float) -> ContrastiveLosses:
    """Temperature-scaled cross entropy over in-batch cosine similarities, both directions"""
    if temperature <= 0:
        raise UsageError(f"temperature must be positive, got {temperature}")
    if bev_pooled.ndim != 2 or bev_pooled.shape != text_pooled.shape or bev_pooled.shape[0] < 1:
        raise ShapeError(f"pooled batches must be matching [N x d_c], got "
                         f"{list(bev_pooled.shape)} and {list(text_pooled.shape)}")
    logits = cosine_matrix(text_pooled, bev_pooled) * (1.0 / temperature)
    targets = np.arange(bev_pooled.shape[0])
    return ContrastiveLosses(cross_entropy_logits(logits, targets),
                             cross_entropy_logits(transpose(logits), targets))


def total_loss(l_sce, l_cg, lambda_cg: float):
    """L = L_SCE + lambda * L_CG"""
    if lambda_cg < 0:
        raise UsageError(f"lambda must be non-negative, got {lambda_cg}")
    return l_sce + lambda_cg * l_cg


class SceParams:
    """Codebook, modality projections, loss weights and the caption decoder"""

    def __init__(self, shared_embeddings: Tensor, bev_projection: Tensor, text_projection: Tensor,
                 decoder: CaptionDecoderParams, temperature: float = 0.07, lambda_cg: float = 0.15,
                 bev_mapping: Optional[Tensor] = None, text_mapping: Optional[Tensor] = None):
        if temperature <= 0:
            raise UsageError(f"temperature must be positive, got {temperature}")
        if lambda_cg < 0:
            raise UsageError(f"lambda must be non-negative, got {lambda_cg}")
        self.shared_embeddings = shared_embeddings
        self.bev_projection = bev_projection
        self.text_projection = text_projection
        self.decoder = decoder
        self.temperature = temperature
        self.lambda_cg = lambda_cg
        self.bev_mapping = bev_mapping
        self.text_mapping = text_mapping

    @property
    def k(self) -> int:
        return int(self.shared_embeddings.shape[0])

    @property
    def d_c(self) -> int:
        return int(self.shared_embeddings.shape[1])


class BatchLosses:
    def __init__(self, contrastive: ContrastiveLosses, cg: Optional[Tensor], total: Tensor):
        self.t2s = contrastive.t2s
        self.s2t = contrastive.s2t
        self.sce = contrastive.sce
        self.cg = cg
        self.total = total


class AlignmentModel:
    """
    Both encoders plus the shared space.

    Scenes: BEV sequence -> linear projection -> codebook reprojection.
    Texts: caption -> text pipeline (with knowledge graph prompting) ->
    linear projection -> codebook reprojection. Without the codebook each
    modality falls back to mean pooling through a tanh mapping layer.
    """

    def __init__(self, config: AlignTrainConfig, vocab: Vocabulary, text: TextPipeline, sce: SceParams):
        self.config = config
        self.vocab = vocab
        self.text = text
        self.sce = sce

    @classmethod
    def create(cls, config: AlignTrainConfig, vocab: Vocabulary, d_b: int,
               knowledge: Optional[KnowledgeBase] = None) -> "AlignmentModel":
        rng = np.random.default_rng(config.seed)
        d_kg = knowledge.model.d_kg if knowledge is not None else None
        text_params = TextEncoderParams.init(len(vocab), config.text, d_kg, rng)
        d_c, d_lang = config.d_c, config.text.d_lang
        shared = rng.normal(0.0, 1.0 / np.sqrt(d_c), (config.k, d_c))
        bev_projection = rng.normal(0.0, 1.0 / np.sqrt(d_b), (d_b, d_c))
        text_projection = rng.normal(0.0, 1.0 / np.sqrt(d_lang), (d_lang, d_c))
        decoder = CaptionDecoderParams.init(len(vocab), d_c, config.decoder, rng)
        bev_mapping = text_mapping = None
        if not config.use_sce:
            bev_mapping = Tensor.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_c), (d_c, d_c)), name="bev_mapping")
            text_mapping = Tensor.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_c), (d_c, d_c)), name="text_mapping")
        sce = SceParams(Tensor.parameter(shared, name="shared_embeddings"),
                        Tensor.parameter(bev_projection, name="bev_projection"),
                        Tensor.parameter(text_projection, name="text_projection"),
                        decoder, config.temperature, config.lambda_cg, bev_mapping, text_mapping)
        pipeline = TextPipeline(vocab, text_params,
                                kge=knowledge.model if knowledge else None,
                                graph=knowledge.graph if knowledge else None,
                                synonyms=knowledge.synonyms if knowledge else None,
                                use_kgp=config.use_kgp)
        return cls(config, vocab, pipeline, sce)

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {
            "sce.shared_embeddings": self.sce.shared_embeddings,
            "sce.bev_projection": self.sce.bev_projection,
            "sce.text_projection": self.sce.text_projection,
            "text.token_embedding": self.text.params.token_embedding,
            "text.output_projection": self.text.params.output_projection,
        }
        if self.text.params.kge_projection is not None:
            params["text.kge_projection"] = self.text.params.kge_projection
        if self.sce.bev_mapping is not None:
            params["sce.bev_mapping"] = self.sce.bev_mapping
            params["sce.text_mapping"] = self.sce.text_mapping
        for name in CaptionDecoderParams.NAMES:
            params[f"decoder.{name}"] = getattr(self.sce.decoder, name)
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def _pool(self, projected: Tensor, mapping: Optional[Tensor]):
        if self.config.use_sce:
            rep = sce_reproject(projected, self.sce.shared_embeddings)
            return rep.pooled, rep.reprojected
        pooled = tanh(matmul(projected.mean(axis=-2, keepdims=True), mapping))
        return reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],)), projected

    def embed_scenes(self, bev_batch: np.ndarray):
        """Pooled [N x d_c] and decoder memory for a stacked BEV batch [N x n x d_b]"""
        bev_batch = np.asarray(bev_batch, dtype=np.float64)
        if bev_batch.ndim != 3 or bev_batch.shape[2] != self.sce.bev_projection.shape[0]:
            raise ShapeError(f"BEV batch must be [N x n x {self.sce.bev_projection.shape[0]}], "
                             f"got {list(bev_batch.shape)}")
        projected = matmul(Tensor(bev_batch), self.sce.bev_projection)
        return self._pool(projected, self.sce.bev_mapping)

    def embed_texts(self, captions: Sequence[str]) -> Tensor:
        """Pooled [N x d_c] for a list of captions"""
        pooled = []
        for caption in captions:
            sequence = matmul(self.text.encode(caption).sequence, self.sce.text_projection)
            pooled.append(self._pool(sequence, self.sce.text_mapping)[0])
        return stack_rows(pooled)

    def batch_losses(self, bev_batch: np.ndarray, captions: Sequence[str]) -> BatchLosses:
        bev_pooled, memory = self.embed_scenes(bev_batch)
        text_pooled = self.embed_texts(captions)
        contrastive = contrastive_loss(bev_pooled, text_pooled, self.sce.temperature)
        if not self.config.use_cg:
            return BatchLosses(contrastive, None, contrastive.sce)
        inputs, targets = teacher_forcing_batch([self.text.token_ids(c) for c in captions],
                                                self.sce.decoder.max_tokens)
        l_cg = cg_loss(decode_batch(self.sce.decoder, memory, inputs), targets)
        return BatchLosses(contrastive, l_cg, total_loss(contrastive.sce, l_cg, self.sce.lambda_cg))

    def scene_vectors(self, bev_batch: np.ndarray) -> np.ndarray:
        return self.embed_scenes(bev_batch)[0].numpy()

    def text_vectors(self, captions: Sequence[str]) -> np.ndarray:
        return self.embed_texts(captions).numpy()


class EpochRecord(BaseModel):
    """One line of the training log"""
    epoch: int
    l_sce: float = Field(serialization_alias="L_SCE")
    l_cg: float = Field(serialization_alias="L_CG")
    total: float
    learning_rate: float

    def log_line(self) -> Dict[str, float]:
        return self.model_dump(by_alias=True)


class TrainResult:
    def __init__(self, model: AlignmentModel, history: List[EpochRecord]):
        self.model = model
        self.history = history

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


class SGD:
    """Plain gradient descent"""

    def step(self, params: Sequence[Tensor], lr: float) -> None:
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad


class AdamW:
    """Adam with decoupled weight decay"""

    def __init__(self, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.moments: Dict[int, List[np.ndarray]] = {}

    def step(self, params: Sequence[Tensor], lr: float) -> None:
        self.t += 1
        for p in params:
            if p.grad is None:
                continue
            m, v = self.moments.setdefault(id(p), [np.zeros_like(p.data), np.zeros_like(p.data)])
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)


def cosine_lr(step: int, total_steps: int, base: float, floor: float) -> float:
    """Cosine annealing from ``base`` at step 0 down to ``floor`` at the last step"""
    if total_steps <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


class AlignmentTrainer:
    """
    Mini-batch training on L = L_SCE + lambda * L_CG.

    Batches come from a seeded shuffle of the training split; trailing
    batches with fewer than two pairs are dropped.
    """

    def __init__(self, corpus: PairedCorpus, config: AlignTrainConfig,
                 knowledge: Optional[KnowledgeBase] = None, model: Optional[AlignmentModel] = None):
        self.corpus = corpus
        self.config = config
        self.train_ids = corpus.ids("train")
        if not self.train_ids:
            raise DataError("corpus has no training samples")
        if config.batch_size > len(self.train_ids):
            raise UsageError(f"batch size {config.batch_size} exceeds {len(self.train_ids)} training samples")
        self.captions = corpus.caption_of()
        self.scenes = corpus.scene_map()
        if model is None:
            vocab = Vocabulary.build(caption for _, caption in corpus.texts)
            d_b = corpus.scenes[0].d_b
            model = AlignmentModel.create(config, vocab, d_b, knowledge if config.use_kgp else None)
        self.model = model
        self.optimizer = SGD() if config.optimizer == "sgd" else AdamW(config.weight_decay)
        self.rng = np.random.default_rng(config.seed + 1)

    def _batches(self) -> List[List[str]]:
        order = [self.train_ids[i] for i in self.rng.permutation(len(self.train_ids))]
        size = self.config.batch_size
        batches = [order[i:i + size] for i in range(0, len(order), size)]
        return [batch for batch in batches if len(batch) >= 2]

    def train_step(self, batch_ids: Sequence[str], lr: float) -> BatchLosses:
        bev = np.stack([self.scenes[i].bev_sequence for i in batch_ids])
        captions = [self.captions[i] for i in batch_ids]
        params = self.model.parameters()
        with Tape() as tape:
            losses = self.model.batch_losses(bev, captions)
            try:
                check_finite(losses.total, "training loss")
            except NumericalError:
                logger.error(f"❌ non-finite loss on batch starting {batch_ids[0]}")
                raise
            tape.backward(losses.total)
        for p in params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {p.name or 'parameter'}")
        self.optimizer.step(params, lr)
        for p in params:
            p.zero_grad()
        return losses

    def stream_epochs(self) -> Iterator[EpochRecord]:
        """Train epoch by epoch, yielding each epoch's mean losses"""
        batches_per_epoch = self.batches_per_epoch()
        total_steps = self.config.epochs * batches_per_epoch
        step = 0
        logger.info(f"🚀 training alignment: {len(self.train_ids)} pairs, "
                    f"{batches_per_epoch} batches/epoch, {self.config.epochs} epochs")
        for epoch in range(1, self.config.epochs + 1):
            sce_sum = cg_sum = total_sum = 0.0
            batches = self._batches()
            lr = self.config.learning_rate
            for batch_ids in batches:
                lr = cosine_lr(step, total_steps, self.config.learning_rate, self.config.min_learning_rate)
                losses = self.train_step(batch_ids, lr)
                sce_sum += losses.sce.item()
                cg_sum += losses.cg.item() if losses.cg is not None else 0.0
                total_sum += losses.total.item()
                step += 1
            count = max(len(batches), 1)
            record = EpochRecord(epoch=epoch, l_sce=sce_sum / count, l_cg=cg_sum / count,
                                 total=total_sum / count, learning_rate=lr)
            logger.info(f"📊 epoch {epoch}: L_SCE={record.l_sce:.4f} L_CG={record.l_cg:.4f} "
                        f"total={record.total:.4f}")
            yield record

    def batches_per_epoch(self) -> int:
        full, rest = divmod(len(self.train_ids), self.config.batch_size)
        return full + (1 if rest >= 2 else 0)


def train_align(corpus: PairedCorpus, kge: Optional[KnowledgeBase], config: AlignTrainConfig,
                on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train both encoders and the shared space; deterministic for a given seed"""
    if not corpus.scenes:
        raise DataError("cannot train on an empty corpus")
    trainer = AlignmentTrainer(corpus, config, kge)
    history: List[EpochRecord] = []
    for record in trainer.stream_epochs():
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    logger.info(f"✅ alignment training complete: final total={history[-1].total:.4f}")
    return TrainResult(trainer.model, history)
