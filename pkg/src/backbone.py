"""Reference PKT backbone: code encoder, gated recurrent knowledge estimator, predictor."""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import accuracy_score, f1_score, mean_squared_error, roc_auc_score
from torch import nn

from src.data import Dataset, LearnerSequence
from src.encoder import EmbeddingProvider
from src.errors import CheckpointError, ConfigurationError, MetricsError
from src.numerics import DTYPE
from src.schemas import BackboneConfig
from utils.checkpoint import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneDims:
    code_dim: int
    d_in: int
    d_q: int
    d_h: int
    questions: int
    concepts: int

    @classmethod
    def for_dataset(cls, dataset: Dataset, code_dim: int, config: BackboneConfig) -> "BackboneDims":
        return cls(
            code_dim=code_dim,
            d_in=config.d_in or code_dim,
            d_q=config.d_q,
            d_h=config.d_h or max(dataset.concept_count, 32),
            questions=dataset.question_count,
            concepts=dataset.concept_count,
        )


@dataclass(frozen=True)
class Metrics:
    auc: float
    f1: float
    rmse: float
    accuracy: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def compute_metrics(labels: Sequence[int], scores: Sequence[float]) -> Metrics:
    """
    Pooled next-attempt metrics.

    Raises:
        MetricsError: When labels hold a single class and AUC is undefined
    """
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(scores, dtype=np.float64)
    if y.size == 0 or np.unique(y).size < 2:
        raise MetricsError("AUC is undefined: labels contain a single class")
    hard = (p >= 0.5).astype(np.int64)
    return Metrics(
        auc=float(roc_auc_score(y, p)),
        f1=float(f1_score(y, hard, zero_division=0)),
        rmse=float(math.sqrt(mean_squared_error(y, p))),
        accuracy=float(accuracy_score(y, hard)),
    )


class EncodedCorpus:
    """Caches per-learner code embeddings; prefixes reuse the full sequence."""

    def __init__(self, enc: EmbeddingProvider):
        self.enc = enc
        self._cache: Dict[str, torch.Tensor] = {}

    def embeddings(self, seq: LearnerSequence) -> torch.Tensor:
        cached = self._cache.get(seq.learner_id)
        if cached is None or cached.shape[0] < seq.length:
            cached = self.enc.encode_many([rec.code for rec in seq.records])
            self._cache[seq.learner_id] = cached
        return cached[: seq.length]


@dataclass
class SequenceBatch:
    codes: torch.Tensor  # (B, T, d)
    questions: torch.Tensor  # (B, T) long
    concepts: torch.Tensor  # (B, T) long
    outcomes: torch.Tensor  # (B, T) float
    lengths: torch.Tensor  # (B,) long

    @property
    def target_mask(self) -> torch.Tensor:
        """True at steps t whose successor t+1 exists, shape (B, T-1)."""
        steps = torch.arange(self.codes.shape[1] - 1)
        return steps.unsqueeze(0) < (self.lengths.unsqueeze(1) - 1)


def collate(seqs: Sequence[LearnerSequence], corpus: EncodedCorpus) -> SequenceBatch:
    t_max = max(seq.length for seq in seqs)
    dim = corpus.enc.dim
    codes = torch.zeros((len(seqs), t_max, dim), dtype=DTYPE)
    questions = torch.zeros((len(seqs), t_max), dtype=torch.long)
    concepts = torch.zeros((len(seqs), t_max), dtype=torch.long)
    outcomes = torch.zeros((len(seqs), t_max), dtype=DTYPE)
    for b, seq in enumerate(seqs):
        t = seq.length
        codes[b, :t] = corpus.embeddings(seq)
        questions[b, :t] = torch.tensor([rec.question_id for rec in seq.records])
        concepts[b, :t] = torch.tensor([rec.concept_id for rec in seq.records])
        outcomes[b, :t] = torch.tensor([float(rec.r) for rec in seq.records], dtype=DTYPE)
    lengths = torch.tensor([seq.length for seq in seqs], dtype=torch.long)
    return SequenceBatch(codes, questions, concepts, outcomes, lengths)


class Backbone(nn.Module):
    def __init__(self, dims: BackboneDims):
        super().__init__()
        self.dims = dims
        self.code_proj = nn.Linear(dims.code_dim, dims.d_in)
        self.question_emb = nn.Embedding(dims.questions, dims.d_q)
        self.concept_emb = nn.Embedding(dims.concepts, dims.d_q)
        self.cell = nn.GRUCell(dims.d_in + 2 * dims.d_q + 2, dims.d_h)
        self.predictor = nn.Linear(dims.d_h + dims.d_q, 1)
        self.to(DTYPE)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for name, param in self.named_parameters():
            if param.dim() >= 2:
                nn.init.xavier_uniform_(param)
            else:
                nn.init.zeros_(param)

    def ce_forward(self, code_embedding: torch.Tensor) -> torch.Tensor:
        return self.code_proj(code_embedding)

    def ke_step(
        self,
        h_prev: torch.Tensor,
        q: torch.Tensor,
        c: torch.Tensor,
        x: torch.Tensor,
        r: torch.Tensor,
    ) -> torch.Tensor:
        """One recurrent update on [x || emb(q) || emb(c) || onehot2(r)]; all inputs batched."""
        onehot = F.one_hot(r.long(), num_classes=2).to(DTYPE)
        inputs = torch.cat([x, self.question_emb(q), self.concept_emb(c), onehot], dim=-1)
        return self.cell(inputs, h_prev)

    def logits(self, h: torch.Tensor, q_next: torch.Tensor) -> torch.Tensor:
        return self.predictor(torch.cat([h, self.question_emb(q_next)], dim=-1)).squeeze(-1)

    def predict(self, h: torch.Tensor, q_next: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(h, q_next))

    def states(self, batch: SequenceBatch) -> torch.Tensor:
        """Knowledge states h_1..h_T, shape (B, T, d_h), starting from h_0 = 0."""
        b, t_max, _ = batch.codes.shape
        h = torch.zeros((b, self.dims.d_h), dtype=DTYPE)
        x = self.ce_forward(batch.codes)
        out = []
        for t in range(t_max):
            h = self.ke_step(h, batch.questions[:, t], batch.concepts[:, t], x[:, t], batch.outcomes[:, t])
            out.append(h)
        return torch.stack(out, dim=1)

    def sequence_states(self, seq: LearnerSequence, corpus: EncodedCorpus) -> torch.Tensor:
        """States for one learner, shape (T, d_h)."""
        return self.states(collate([seq], corpus))[0]

    def batch_loss(self, batch: SequenceBatch) -> torch.Tensor:
        """Summed next-attempt cross-entropy over steps 1..T_u - 1 of every learner."""
        if batch.codes.shape[1] < 2:
            return torch.zeros((), dtype=DTYPE)
        h = self.states(batch)
        logits = self.logits(h[:, :-1], batch.questions[:, 1:])
        losses = F.binary_cross_entropy_with_logits(logits, batch.outcomes[:, 1:], reduction="none")
        return (losses * batch.target_mask).sum()


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_auc: Optional[float]


@dataclass
class BackboneTrainingResult:
    model: Backbone
    history: List[EpochStats] = field(default_factory=list)
    best_epoch: int = 0


def _batches(seqs: Sequence[LearnerSequence], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(seqs))
    for start in range(0, len(seqs), batch_size):
        yield [seqs[i] for i in order[start:start + batch_size]]


def train_backbone(
    train: Dataset,
    valid: Dataset,
    config: BackboneConfig,
    enc: EmbeddingProvider,
    dims: Optional[BackboneDims] = None,
) -> BackboneTrainingResult:
    """
    Fit the backbone with Adam on the summed next-attempt cross-entropy.

    Keeps the parameters of the epoch with the best validation AUC.
    """
    trainable = [seq for seq in train.sequences if seq.length >= 2]
    if not train.sequences:
        raise ConfigurationError("empty training split")
    if len(trainable) < len(train.sequences):
        logger.info("Skipping %d single-step learners", len(train.sequences) - len(trainable))
    if not trainable:
        raise ConfigurationError("no training learner has a next step to predict")

    torch.manual_seed(config.seed)
    dims = dims or BackboneDims.for_dataset(train, enc.dim, config)
    model = Backbone(dims)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    corpus = EncodedCorpus(enc)
    rng = np.random.default_rng(config.seed)

    result = BackboneTrainingResult(model=model)
    best_score = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        epoch_loss = 0.0
        for seqs in _batches(trainable, config.batch_size, rng):
            optimizer.zero_grad()
            loss = model.batch_loss(collate(seqs, corpus))
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())

        valid_auc = None
        if valid.sequences:
            try:
                valid_auc = evaluate(model, valid, enc, corpus=corpus).auc
            except MetricsError as e:
                logger.warning("Validation AUC unavailable: %s", e)
        result.history.append(EpochStats(epoch, epoch_loss, valid_auc))
        logger.info("Backbone epoch %d: train loss %.4f, valid AUC %s", epoch, epoch_loss, valid_auc)

        score = valid_auc if valid_auc is not None else -epoch_loss
        if score > best_score:
            best_score, stale = score, 0
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("Early stop after %d epochs without improvement", stale)
                break

    model.load_state_dict(best_state)
    model.eval()
    logger.info("Backbone best epoch %d (score %.4f)", result.best_epoch, best_score)
    return result


@torch.no_grad()
def predictions(
    model: Backbone,
    dataset: Dataset,
    enc: EmbeddingProvider,
    corpus: Optional[EncodedCorpus] = None,
) -> Tuple[List[int], List[float]]:
    corpus = corpus or EncodedCorpus(enc)
    labels: List[int] = []
    scores: List[float] = []
    for seq in dataset.sequences:
        if seq.length < 2:
            continue
        h = model.sequence_states(seq, corpus)
        q_next = torch.tensor(seq.questions[1:], dtype=torch.long)
        scores.extend(model.predict(h[:-1], q_next).tolist())
        labels.extend(seq.outcomes[1:])
    return labels, scores


def evaluate(
    model: Backbone,
    dataset: Dataset,
    enc: EmbeddingProvider,
    corpus: Optional[EncodedCorpus] = None,
) -> Metrics:
    labels, scores = predictions(model, dataset, enc, corpus)
    return compute_metrics(labels, scores)


def save_backbone(model: Backbone, path: Union[str, Path]) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": "backbone", "dims": asdict(model.dims)})


def load_backbone(path: Union[str, Path]) -> Backbone:
    slots, meta = load_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path}: expected a backbone checkpoint, found {meta.get('kind')!r}")
    model = Backbone(BackboneDims(**meta["dims"]))
    model.load_state_dict(slots)
    model.eval()
    return model
