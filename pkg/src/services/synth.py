"""Synthetic programming sessions with known unwanted/weak/core labels."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from src.data import Dataset, LearnerSequence, SubmissionRecord, save_dataset
from src.denoise import NoiseAnnotation, Role
from src.encoder import FileEmbeddingProvider, save_embeddings
from src.errors import InfeasibleConfigError, SchemaError
from src.schemas import SynthConfig

logger = logging.getLogger(__name__)

SHARED_WEIGHT = 1.0
CONCEPT_SCALE = 1.0
QUESTION_OFFSET = 0.3
CONCISE_SHARED = 0.2
CONCISE_NOISE = 0.1
BUG_AXIS = 1
BUG_OFFSET = 0.5
UNWANTED_NORM = 6.0
ABILITY_SD = 0.7
MASTERY_SLOPE = 2.0
MIN_LENGTH = 5
FAIL_VERDICTS = ("Wrong Answer", "Time Limit Exceeded", "Runtime Error")
UNWANTED_VERDICTS = ("Compile Error", "Wrong Answer")


@dataclass(frozen=True)
class TruthStep:
    step: int
    role: Role
    core_step: Optional[int]
    concept: int
    mastery: float
    p_accept: float

    def to_dict(self, learner_id: str) -> Dict:
        data = asdict(self)
        data["role"] = self.role.value
        data["learner"] = learner_id
        return data


@dataclass
class GroundTruth:
    steps: Dict[str, List[TruthStep]] = field(default_factory=dict)
    concept_centroids: Optional[np.ndarray] = None

    def roles(self, learner_id: str) -> List[Role]:
        return [ts.role for ts in self.steps[learner_id]]

    def count(self, role: Role) -> int:
        return sum(1 for seq in self.steps.values() for ts in seq if ts.role is role)


@dataclass(frozen=True)
class RoleScore:
    precision: float
    recall: float
    f1: float
    support: int


def _unit(rng: np.random.Generator, dim: int, dims: Sequence[int]) -> np.ndarray:
    vec = np.zeros(dim)
    draw = rng.normal(size=len(dims))
    vec[list(dims)] = draw / max(np.linalg.norm(draw), 1e-12)
    return vec


def _ball(rng: np.random.Generator, dim: int, dims: Sequence[int], radius: float) -> np.ndarray:
    """Uniform point in the radius ball of the given subspace."""
    direction = _unit(rng, dim, dims)
    return direction * radius * rng.uniform() ** (1.0 / len(dims))


def _orthogonal_unit(rng: np.random.Generator, dim: int, dims: Sequence[int], against: np.ndarray) -> np.ndarray:
    """Unit vector in ``dims`` orthogonal to ``against``; zero when no such direction exists."""
    idx = list(dims)
    draw = rng.normal(size=len(idx))
    ref = against[idx]
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm > 1e-12:
        ref = ref / ref_norm
        draw = draw - (draw @ ref) * ref
    vec = np.zeros(dim)
    norm = float(np.linalg.norm(draw))
    if norm > 1e-9:
        vec[idx] = draw / norm
    return vec


def _check_feasible(cfg: SynthConfig) -> None:
    if cfg.margin <= cfg.perturbation_radius:
        raise InfeasibleConfigError(
            f"margin {cfg.margin} must exceed perturbation_radius {cfg.perturbation_radius}"
        )
    if cfg.dim < 6:
        raise InfeasibleConfigError(f"dim {cfg.dim} leaves no room for concept and noise subspaces")


def generate(cfg: SynthConfig) -> Tuple[Dataset, GroundTruth, FileEmbeddingProvider]:
    """
    Generate learners whose submissions carry ground-truth roles.

    Axis 0 is shared by every question and axis 1 marks failing code. Concept
    and question centroids live in axes 2..dim//2-1 and the remaining axes
    are reserved for unwanted codes. A core code sits at its question
    centroid plus a fixed-norm offset orthogonal to it; a
    ``short_solution_rate`` share are concise, with a small offset and a
    weak shared component. Weak codes stay within ``perturbation_radius`` of
    the latest core and repeat its outcome. Unwanted codes reuse the current
    question, point along a noise axis and carry the mean shared component,
    so only their similarity profile sets them apart. Acceptance follows a
    logistic in the learner's ability plus concept mastery, which only core
    attempts raise.

    Raises:
        InfeasibleConfigError: margin <= perturbation_radius, or dim < 6
    """
    _check_feasible(cfg)
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    split = d // 2
    concept_axes = range(2, split)
    noise_axes = range(split, d)
    shared = np.zeros(d)
    shared[0] = 1.0
    bug = np.zeros(d)
    bug[BUG_AXIS] = BUG_OFFSET

    centroids = np.stack([
        SHARED_WEIGHT * shared + CONCEPT_SCALE * _unit(rng, d, concept_axes) for _ in range(cfg.concepts)
    ])
    question_concept = np.concatenate([
        np.arange(cfg.concepts), rng.integers(cfg.concepts, size=cfg.questions - cfg.concepts)
    ])
    question_centroids = np.stack([
        centroids[question_concept[q]] + QUESTION_OFFSET * _unit(rng, d, concept_axes)
        for q in range(cfg.questions)
    ])
    difficulty = rng.normal(0.0, 0.5, size=cfg.questions)
    unwanted_norm = max(UNWANTED_NORM, 2.0 * cfg.margin)
    unwanted_shared = (1.0 - cfg.short_solution_rate) * SHARED_WEIGHT + cfg.short_solution_rate * CONCISE_SHARED

    vectors: Dict[str, np.ndarray] = {}
    sequences: List[LearnerSequence] = []
    truth = GroundTruth(concept_centroids=centroids)
    for u in range(cfg.learners):
        learner = f"u{u:04d}"
        length = max(MIN_LENGTH, int(rng.poisson(cfg.mean_length)))
        mastery = rng.normal(ABILITY_SD * rng.normal() - 0.5, 0.5, size=cfg.concepts)
        noise_order = rng.permutation(list(noise_axes))
        records: List[SubmissionRecord] = []
        steps: List[TruthStep] = []
        last_core: Optional[Tuple[int, int, np.ndarray, TruthStep, SubmissionRecord]] = None
        unwanted_seen = 0

        for t in range(1, length + 1):
            key = f"{learner}:{t}"
            draw = rng.uniform()
            if draw < cfg.unwanted_rate:
                q = last_core[1] if last_core is not None else int(rng.integers(cfg.questions))
                k = int(question_concept[q])
                axis = noise_order[unwanted_seen % len(noise_order)]
                unwanted_seen += 1
                vec = unwanted_shared * shared + bug
                vec[axis] += unwanted_norm if rng.uniform() < 0.5 else -unwanted_norm
                vec += 0.05 * _unit(rng, d, noise_axes)
                vectors[key] = vec
                verdict = str(rng.choice(UNWANTED_VERDICTS))
                steps.append(TruthStep(t, Role.UNWANTED, None, k, float(mastery[k]), 0.0))
                records.append(SubmissionRecord(t, q, k, key, verdict, 0))
                continue

            if draw < cfg.unwanted_rate + cfg.weak_rate and last_core is not None:
                core_step, q, core_vec, core_truth, core_record = last_core
                vectors[key] = core_vec + _ball(rng, d, concept_axes, cfg.perturbation_radius)
                steps.append(TruthStep(
                    t, Role.WEAK, core_step, core_truth.concept, core_truth.mastery, core_truth.p_accept
                ))
                records.append(SubmissionRecord(
                    t, q, core_record.concept_id, key, core_record.feedback, core_record.r
                ))
                continue

            q = int(rng.integers(cfg.questions))
            k = int(question_concept[q])
            vec = question_centroids[q].copy()
            offset = _orthogonal_unit(rng, d, concept_axes, vec)
            if rng.uniform() < cfg.short_solution_rate:
                vec[0] = CONCISE_SHARED
                vec += cfg.core_noise * CONCISE_NOISE * offset
            else:
                vec += cfg.core_noise * offset
            p_accept = 1.0 / (1.0 + math.exp(-MASTERY_SLOPE * (mastery[k] - difficulty[q])))
            r = int(rng.uniform() < p_accept)
            verdict = "Accepted" if r else str(rng.choice(FAIL_VERDICTS))
            if not r:
                vec = vec + bug
            vectors[key] = vec
            core_truth = TruthStep(t, Role.CORE, None, k, float(mastery[k]), p_accept)
            core_record = SubmissionRecord(t, q, k, key, verdict, r)
            steps.append(core_truth)
            records.append(core_record)
            last_core = (t, q, vec, core_truth, core_record)
            mastery[k] += cfg.learning_gain

        sequences.append(LearnerSequence(learner, tuple(records)))
        truth.steps[learner] = steps

    dataset = Dataset(tuple(sequences), cfg.questions, cfg.concepts)
    provider = FileEmbeddingProvider(vectors, d)
    logger.info(
        "Generated %d learners, %d steps (%d unwanted, %d weak)",
        dataset.learner_count, len(vectors), truth.count(Role.UNWANTED), truth.count(Role.WEAK),
    )
    return dataset, truth, provider


def _binary_scores(truth: Sequence[int], pred: Sequence[int]) -> RoleScore:
    precision, recall, f1, _ = precision_recall_fscore_support(
        truth, pred, average="binary", zero_division=0
    )
    return RoleScore(float(precision), float(recall), float(f1), int(sum(truth)))


def score_identification(preds: Sequence[NoiseAnnotation], truth: GroundTruth) -> Dict[str, RoleScore]:
    """
    Binary detection scores for the unwanted and weak roles.

    Weak detection does not require the predicted core to match.

    Raises:
        SchemaError: A prediction's learner or length does not match the truth
    """
    true_u: List[int] = []
    pred_u: List[int] = []
    true_w: List[int] = []
    pred_w: List[int] = []
    for annotation in preds:
        expected = truth.steps.get(annotation.learner_id)
        if expected is None:
            raise SchemaError(f"no ground truth for learner {annotation.learner_id}")
        if len(expected) != len(annotation):
            raise SchemaError(
                f"learner {annotation.learner_id}: {len(annotation)} predicted steps, {len(expected)} true"
            )
        for ts, sr in zip(expected, annotation.roles):
            true_u.append(int(ts.role is Role.UNWANTED))
            pred_u.append(int(sr.role is Role.UNWANTED))
            true_w.append(int(ts.role is Role.WEAK))
            pred_w.append(int(sr.role is Role.WEAK))
    return {
        Role.UNWANTED.value: _binary_scores(true_u, pred_u),
        Role.WEAK.value: _binary_scores(true_w, pred_w),
    }


def save_truth(truth: GroundTruth, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for learner, steps in truth.steps.items():
            for ts in steps:
                fh.write(json.dumps(ts.to_dict(learner)) + "\n")


def load_truth(path: Union[str, Path]) -> GroundTruth:
    truth = GroundTruth()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            data = json.loads(line)
            learner = data.pop("learner")
            data["role"] = Role(data["role"])
            truth.steps.setdefault(learner, []).append(TruthStep(**data))
    return truth


def save_benchmark(
    dataset: Dataset,
    truth: GroundTruth,
    provider: FileEmbeddingProvider,
    out_dir: Union[str, Path],
) -> Dict[str, Path]:
    """Write dataset.jsonl, embeddings.bin (+ .keys) and truth.jsonl into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out / "dataset.jsonl",
        "embeddings": out / "embeddings.bin",
        "truth": out / "truth.jsonl",
    }
    save_dataset(dataset, paths["dataset"])
    save_embeddings(provider, paths["embeddings"])
    save_truth(truth, paths["truth"])
    logger.info("Wrote synthetic benchmark to %s", out)
    return paths
