"""Coda tuning on a frozen backbone: noise-aware losses, navigational term, inductive evaluation."""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from src.adaptor import AdaptorParams, correct_state, sequence_adaptor_loss
from src.backbone import Backbone, EncodedCorpus, Metrics, compute_metrics
from src.data import Dataset, LearnerSequence, SolutionBank
from src.denoise import DenoiseParams, NoiseAnnotation, StepRole, annotate_sequence, step_features
from src.encoder import EmbeddingProvider
from src.errors import CheckpointError, ConfigurationError, ContractViolation, MetricsError
from src.numerics import DTYPE, ParamStore
from src.prompt import build_prompt, build_prompts
from src.schemas import CodaConfig
from utils.checkpoint import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


def nav_bound(g: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """
    Gauss-Newton bound on the loss change of a step delta: s + s^2, s = sum |g_i| |delta_i|.

    Raises:
        ValueError: If g and delta differ in shape
    """
    if g.shape != delta.shape:
        raise ValueError(f"dimension mismatch: {tuple(g.shape)} vs {tuple(delta.shape)}")
    s = (g.abs() * delta.abs()).sum()
    return s + s * s


@dataclass
class BatchSnapshot:
    """Parameters at the start of the previous batch and the prediction-loss gradient there."""

    theta: torch.Tensor
    grad: torch.Tensor

    def __post_init__(self):
        if self.theta.shape != self.grad.shape:
            raise ValueError(f"snapshot shapes differ: {tuple(self.theta.shape)} vs {tuple(self.grad.shape)}")

    def delta(self, theta: torch.Tensor) -> torch.Tensor:
        return theta - self.theta


@dataclass
class BatchLoss:
    pkt: torch.Tensor
    adaptor: torch.Tensor
    nav: torch.Tensor
    nav_weight: float = 1.0

    @property
    def total(self) -> torch.Tensor:
        return self.pkt + self.adaptor + self.nav_weight * self.nav

    def to_dict(self) -> Dict[str, float]:
        return {
            "pkt": float(self.pkt.detach()),
            "adaptor": float(self.adaptor.detach()),
            "nav": float(self.nav.detach()),
            "total": float(self.total.detach()),
        }


class Coda(nn.Module):
    """Every tunable parameter: the denoiser and the adaptor."""

    def __init__(self, dim: int, d_h: int, rank: Optional[int] = None):
        super().__init__()
        self.denoise = DenoiseParams(dim)
        self.adaptor = AdaptorParams(dim, d_h, rank)

    @property
    def dims(self) -> Dict[str, int]:
        return {"dim": self.denoise.dim, "d_h": self.adaptor.d_h, "rank": self.adaptor.rank}

    def zero_(self) -> "Coda":
        with torch.no_grad():
            for param in self.parameters():
                param.zero_()
        return self


def flat_parameters(params: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([p.reshape(-1) for p in params])


def _flat_grads(grads, params: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([
        (torch.zeros_like(p) if g is None else g).reshape(-1) for g, p in zip(grads, params)
    ])


class CodaPipeline:
    """Frozen backbone + Coda parameters + solution bank, per-learner losses and corrected states."""

    def __init__(
        self,
        backbone: Backbone,
        coda: Coda,
        config: CodaConfig,
        bank: SolutionBank,
        corpus: EncodedCorpus,
    ):
        self.backbone = backbone
        self.coda = coda
        self.config = config
        self.bank = bank
        self.corpus = corpus
        self.backbone_store = ParamStore.from_module(backbone, prefix="backbone.", frozen=True)
        self._states: Dict[str, torch.Tensor] = {}

    @property
    def store(self) -> ParamStore:
        return self.backbone_store.merged(ParamStore.from_module(self.coda, prefix="coda."))

    def states(self, seq: LearnerSequence) -> torch.Tensor:
        cached = self._states.get(seq.learner_id)
        if cached is None or cached.shape[0] < seq.length:
            with torch.no_grad():
                cached = self.backbone.sequence_states(seq, self.corpus)
            self._states[seq.learner_id] = cached
        return cached[: seq.length]

    def annotate(self, seq: LearnerSequence) -> NoiseAnnotation:
        return annotate_sequence(
            seq, self.corpus.embeddings(seq), self.bank, self.coda.denoise, self.config, self.config.seed
        )

    def corrected_states(self, seq: LearnerSequence, annotation: NoiseAnnotation) -> torch.Tensor:
        feats = step_features(annotation, self.corpus.embeddings(seq), self.coda.denoise, self.config)
        prompts = build_prompts(annotation, feats, self.coda.adaptor.W_p)
        return correct_state(self.states(seq), prompts, self.coda.adaptor)

    def sequence_losses(self, seq: LearnerSequence, annotation: Optional[NoiseAnnotation] = None) -> BatchLoss:
        """Prediction loss over steps 1..T-1 and noise-feature loss over 1..T for one learner."""
        if annotation is None:
            annotation = self.annotate(seq)
        corrected = self.corrected_states(seq, annotation)
        zero = torch.zeros((), dtype=DTYPE)
        if seq.length >= 2:
            q_next = torch.tensor(seq.questions[1:], dtype=torch.long)
            r_next = torch.tensor(seq.outcomes[1:], dtype=DTYPE)
            logits = self.backbone.logits(corrected[:-1], q_next)
            pkt = F.binary_cross_entropy_with_logits(logits, r_next, reduction="sum")
        else:
            pkt = zero
        adaptor = sequence_adaptor_loss(
            annotation,
            corrected,
            weak_loss=self.config.weak_loss,
            unwanted_loss=self.config.identify_unwanted,
        )
        return BatchLoss(pkt, adaptor, zero, self.config.nav_weight)

    def batch_losses(
        self,
        seqs: Sequence[LearnerSequence],
        annotations: Optional[Dict[str, NoiseAnnotation]] = None,
    ) -> Tuple[BatchLoss, Dict[str, NoiseAnnotation]]:
        annotations = dict(annotations or {})
        pkt = torch.zeros((), dtype=DTYPE)
        adaptor = torch.zeros((), dtype=DTYPE)
        for seq in seqs:
            if seq.learner_id not in annotations:
                annotations[seq.learner_id] = self.annotate(seq)
            losses = self.sequence_losses(seq, annotations[seq.learner_id])
            pkt = pkt + losses.pkt
            adaptor = adaptor + losses.adaptor
        return BatchLoss(pkt, adaptor, torch.zeros((), dtype=DTYPE), self.config.nav_weight), annotations

    def prefix_states(self, seq: LearnerSequence) -> Tuple[torch.Tensor, torch.Tensor, List[StepRole]]:
        """
        Raw and corrected states with the graph rebuilt over every observed prefix.

        Row t-1 of the corrected stack uses only steps 1..t; the role list holds
        the label step t received in its own prefix.
        """
        h = self.states(seq)
        embeddings = self.corpus.embeddings(seq)
        corrected = []
        roles: List[StepRole] = []
        with torch.no_grad():
            for t in range(1, seq.length + 1):
                prefix = seq.prefix(t)
                annotation = annotate_sequence(
                    prefix, embeddings[:t], self.bank, self.coda.denoise, self.config, self.config.seed
                )
                feats = step_features(annotation, embeddings, self.coda.denoise, self.config)
                role = annotation.roles[t - 1]
                p = build_prompt(role.role, feats[t - 1], self.coda.adaptor.W_p)
                corrected.append(correct_state(h[t - 1], p, self.coda.adaptor))
                roles.append(role)
        return h, torch.stack(corrected), roles


@dataclass
class TuneEpochStats:
    epoch: int
    pkt: float
    adaptor: float
    nav: float
    total: float
    valid_auc: Optional[float]


@dataclass
class TuneResult:
    coda: Coda
    history: List[TuneEpochStats] = field(default_factory=list)
    best_epoch: int = 0
    annotations: Dict[str, NoiseAnnotation] = field(default_factory=dict)


def _check_frozen(pipeline: CodaPipeline, digest: str) -> None:
    for name, tensor in pipeline.backbone_store:
        if tensor.requires_grad:
            raise ContractViolation(f"backbone slot {name} is trainable during tuning")
    if pipeline.backbone_store.frozen_digest() != digest:
        raise ContractViolation("backbone parameters changed during tuning")


def _navigation_term(
    pkt_adaptor: torch.Tensor,
    params: List[nn.Parameter],
    snapshot: BatchSnapshot,
    lr: float,
) -> Tuple[torch.Tensor, Tuple]:
    grads = torch.autograd.grad(pkt_adaptor, params, create_graph=True, allow_unused=True)
    candidate = torch.cat([
        (p - lr * (torch.zeros_like(p) if g is None else g)).reshape(-1) for p, g in zip(params, grads)
    ])
    return nav_bound(snapshot.grad, snapshot.delta(candidate)), grads


def train_step(
    pipeline: CodaPipeline,
    optimizer: torch.optim.Optimizer,
    seqs: Sequence[LearnerSequence],
    snapshot: Optional[BatchSnapshot],
) -> Tuple[BatchLoss, Optional[BatchSnapshot], Dict[str, NoiseAnnotation]]:
    """
    One batch: annotate, losses, navigational term against the previous snapshot, update.

    The first batch has no snapshot and no navigational term. Returns the
    batch losses, the snapshot for the next batch and the annotations used.
    """
    config = pipeline.config
    params = [p for p in pipeline.coda.parameters()]
    theta_start = flat_parameters(params).detach().clone()

    losses, annotations = pipeline.batch_losses(seqs)
    pkt_adaptor = losses.pkt + losses.adaptor
    if not pkt_adaptor.requires_grad:
        logger.debug("Batch of %d learners carries no gradient, skipped", len(seqs))
        return losses, snapshot, annotations
    if losses.pkt.requires_grad:
        grad_pkt = torch.autograd.grad(losses.pkt, params, retain_graph=True, allow_unused=True)
    else:
        grad_pkt = [None] * len(params)
    next_snapshot = BatchSnapshot(theta_start, _flat_grads(grad_pkt, params).detach())

    use_nav = snapshot is not None and config.nav_weight > 0
    optimizer.zero_grad()
    if use_nav:
        nav, grads_p = _navigation_term(pkt_adaptor, params, snapshot, config.learning_rate)
        losses.nav = nav
        if config.nav_update == "joint":
            losses.total.backward()
            optimizer.step()
        else:
            grads_nav = torch.autograd.grad(config.nav_weight * nav, params, allow_unused=True)
            for p, g in zip(params, grads_p):
                p.grad = None if g is None else g.detach().clone()
            optimizer.step()
            optimizer.zero_grad()
            for p, g in zip(params, grads_nav):
                p.grad = None if g is None else g.detach().clone()
            optimizer.step()
    else:
        pkt_adaptor.backward()
        optimizer.step()

    logger.debug("Batch losses %s", losses.to_dict())
    return losses, next_snapshot, annotations


def _batches(seqs: Sequence[LearnerSequence], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(seqs))
    for start in range(0, len(seqs), batch_size):
        yield [seqs[i] for i in order[start:start + batch_size]]


def tune_coda(
    backbone: Backbone,
    train: Dataset,
    valid: Dataset,
    config: CodaConfig,
    enc: EmbeddingProvider,
    bank: SolutionBank,
) -> TuneResult:
    """
    Tune the denoiser and adaptor against a frozen backbone.

    Keeps the parameters of the epoch with the best validation AUC. The
    backbone is checked bit-for-bit after every epoch.

    Raises:
        ConfigurationError: Empty training split
        ContractViolation: A backbone slot became trainable or changed
    """
    if not train.sequences:
        raise ConfigurationError("empty training split")
    torch.manual_seed(config.seed)
    corpus = EncodedCorpus(enc)
    coda = Coda(enc.dim, backbone.dims.d_h, config.rank)
    pipeline = CodaPipeline(backbone, coda, config, bank, corpus)
    digest = pipeline.backbone_store.frozen_digest()
    optimizer = torch.optim.Adam(coda.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(config.seed)

    result = TuneResult(coda=coda)
    best_score = -math.inf
    best_state = copy.deepcopy(coda.state_dict())
    snapshot: Optional[BatchSnapshot] = None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        sums = {"pkt": 0.0, "adaptor": 0.0, "nav": 0.0, "total": 0.0}
        annotations: Dict[str, NoiseAnnotation] = {}
        for seqs in _batches(train.sequences, config.batch_size, rng):
            losses, snapshot, batch_annotations = train_step(pipeline, optimizer, seqs, snapshot)
            annotations.update(batch_annotations)
            for key, value in losses.to_dict().items():
                sums[key] += value
        _check_frozen(pipeline, digest)
        result.annotations = annotations

        valid_auc = None
        if valid.sequences:
            try:
                valid_auc = coda_evaluate(backbone, coda, valid, enc, bank, config, corpus=corpus).auc
            except MetricsError as e:
                logger.warning("Validation AUC unavailable: %s", e)
        result.history.append(TuneEpochStats(epoch, sums["pkt"], sums["adaptor"], sums["nav"], sums["total"], valid_auc))
        logger.info(
            "Coda epoch %d: pkt %.4f, adaptor %.4f, nav %.4f, valid AUC %s",
            epoch, sums["pkt"], sums["adaptor"], sums["nav"], valid_auc,
        )

        score = valid_auc if valid_auc is not None else -sums["total"]
        if score > best_score:
            best_score, stale = score, 0
            best_state = copy.deepcopy(coda.state_dict())
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("Early stop after %d epochs without improvement", stale)
                break

    coda.load_state_dict(best_state)
    logger.info("Coda best epoch %d (score %.4f)", result.best_epoch, best_score)
    return result


def coda_predictions(
    backbone: Backbone,
    coda: Coda,
    dataset: Dataset,
    enc: EmbeddingProvider,
    bank: SolutionBank,
    config: CodaConfig,
    corpus: Optional[EncodedCorpus] = None,
) -> Tuple[List[int], List[float]]:
    pipeline = CodaPipeline(backbone, coda, config, bank, corpus or EncodedCorpus(enc))
    labels: List[int] = []
    scores: List[float] = []
    with torch.no_grad():
        for seq in dataset.sequences:
            if seq.length < 2:
                continue
            _, corrected, _ = pipeline.prefix_states(seq)
            q_next = torch.tensor(seq.questions[1:], dtype=torch.long)
            scores.extend(backbone.predict(corrected[:-1], q_next).tolist())
            labels.extend(seq.outcomes[1:])
    return labels, scores


def coda_evaluate(
    backbone: Backbone,
    coda: Coda,
    dataset: Dataset,
    enc: EmbeddingProvider,
    bank: SolutionBank,
    config: CodaConfig,
    corpus: Optional[EncodedCorpus] = None,
) -> Metrics:
    """Inductive evaluation: each prediction sees only the graph of its own prefix."""
    labels, scores = coda_predictions(backbone, coda, dataset, enc, bank, config, corpus)
    return compute_metrics(labels, scores)


def save_coda(coda: Coda, config: CodaConfig, path: Union[str, Path]) -> None:
    save_checkpoint(path, coda.state_dict(), {"kind": "coda", "dims": coda.dims, "config": config.model_dump()})


def load_coda(path: Union[str, Path]) -> Tuple[Coda, CodaConfig]:
    slots, meta = load_checkpoint(path)
    if meta.get("kind") != "coda":
        raise CheckpointError(f"{path}: expected a coda checkpoint, found {meta.get('kind')!r}")
    coda = Coda(**meta["dims"])
    coda.load_state_dict(slots)
    return coda, CodaConfig.model_validate(meta["config"])
