"""Submission data model, JSONL ingestion, learner-level splits and the solution bank."""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from src.errors import DatasetParseError, SchemaError, SplitError
from src.numerics import DTYPE
from src.schemas import SubmissionLine

logger = logging.getLogger(__name__)

ACCEPTED_VERDICTS: FrozenSet[str] = frozenset({"Accepted"})
MIN_SEQUENCE_LENGTH = 5
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class SubmissionRecord:
    step: int
    question_id: int
    concept_id: int
    code: str
    feedback: str
    r: int


@dataclass(frozen=True)
class LearnerSequence:
    learner_id: str
    records: Tuple[SubmissionRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise SchemaError(f"learner {self.learner_id} has no records")
        steps = [rec.step for rec in self.records]
        if steps != list(range(1, len(steps) + 1)):
            raise SchemaError(f"learner {self.learner_id}: steps must run 1..T, got {steps}")

    @property
    def length(self) -> int:
        return len(self.records)

    def prefix(self, t: int) -> "LearnerSequence":
        return LearnerSequence(self.learner_id, self.records[:t])

    @property
    def questions(self) -> List[int]:
        return [rec.question_id for rec in self.records]

    @property
    def outcomes(self) -> List[int]:
        return [rec.r for rec in self.records]


@dataclass(frozen=True)
class Dataset:
    sequences: Tuple[LearnerSequence, ...]
    question_count: int
    concept_count: int

    def __post_init__(self):
        for seq in self.sequences:
            for rec in seq.records:
                if not 0 <= rec.question_id < self.question_count:
                    raise SchemaError(
                        f"learner {seq.learner_id} step {rec.step}: question {rec.question_id} "
                        f"outside [0, {self.question_count})"
                    )
                if not 0 <= rec.concept_id < self.concept_count:
                    raise SchemaError(
                        f"learner {seq.learner_id} step {rec.step}: concept {rec.concept_id} "
                        f"outside [0, {self.concept_count})"
                    )

    @property
    def learner_count(self) -> int:
        return len(self.sequences)

    def by_learner(self) -> Dict[str, LearnerSequence]:
        return {seq.learner_id: seq for seq in self.sequences}

    def subset(self, sequences: Iterable[LearnerSequence]) -> "Dataset":
        return Dataset(tuple(sequences), self.question_count, self.concept_count)


def verdict_to_outcome(verdict: str, accepted: FrozenSet[str] = ACCEPTED_VERDICTS) -> int:
    return 1 if verdict in accepted else 0


def _ordering_key(line: SubmissionLine):
    if line.step is not None:
        return (0, line.step, "")
    if isinstance(line.timestamp, (int, float)):
        return (1, float(line.timestamp), "")
    return (2, 0.0, str(line.timestamp))


def load_dataset(
    path: Union[str, Path],
    format: str = "jsonl",
    question_count: Optional[int] = None,
    concept_count: Optional[int] = None,
    accepted_verdicts: FrozenSet[str] = ACCEPTED_VERDICTS,
    min_length: int = MIN_SEQUENCE_LENGTH,
) -> Dataset:
    """
    Load submissions, group them by learner and order each group.

    Learners keep first-appearance order; records are sorted by their step
    (or timestamp) and renumbered 1..T. Learners with fewer than
    ``min_length`` submissions are dropped.

    Raises:
        DatasetParseError: Malformed JSON or schema violation, with line number
        SchemaError: Ids outside the declared question/concept counts
    """
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")

    grouped: "OrderedDict[str, List[SubmissionLine]]" = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                line = SubmissionLine.model_validate(json.loads(raw))
            except json.JSONDecodeError as e:
                raise DatasetParseError(f"invalid JSON ({e.msg})", line_number) from e
            except ValidationError as e:
                raise DatasetParseError(f"schema violation: {e.errors()[0]['msg']}", line_number) from e
            if line.question < 0 or line.concept < 0:
                raise SchemaError(f"line {line_number}: negative question or concept id")
            grouped.setdefault(line.learner, []).append(line)

    if not grouped:
        raise DatasetParseError("no sequences")

    sequences = []
    dropped = 0
    for learner, lines in grouped.items():
        if len(lines) < min_length:
            dropped += 1
            continue
        lines.sort(key=_ordering_key)
        records = tuple(
            SubmissionRecord(
                step=i,
                question_id=line.question,
                concept_id=line.concept,
                code=line.code,
                feedback=line.verdict,
                r=verdict_to_outcome(line.verdict, accepted_verdicts),
            )
            for i, line in enumerate(lines, start=1)
        )
        sequences.append(LearnerSequence(learner, records))

    if not sequences:
        raise DatasetParseError("no sequences")
    if dropped:
        logger.info("Dropped %d learners with fewer than %d submissions", dropped, min_length)

    all_records = [rec for seq in sequences for rec in seq.records]
    m = question_count if question_count is not None else max(r.question_id for r in all_records) + 1
    k = concept_count if concept_count is not None else max(r.concept_id for r in all_records) + 1
    dataset = Dataset(tuple(sequences), m, k)
    logger.info(
        "Loaded %d learners, %d submissions (M=%d, K=%d) from %s",
        dataset.learner_count, len(all_records), m, k, path,
    )
    return dataset


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset.sequences:
            for rec in seq.records:
                line = {
                    "learner": seq.learner_id,
                    "step": rec.step,
                    "question": rec.question_id,
                    "concept": rec.concept_id,
                    "code": rec.code,
                    "verdict": rec.feedback,
                }
                fh.write(json.dumps(line, ensure_ascii=False) + "\n")


def split_dataset(
    d: Dataset,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Split whole learner sequences into train/valid/test.

    Valid and test take round(n * ratio) learners (at least one each); train
    takes the remainder.

    Raises:
        SplitError: Ratios not summing to 1, or fewer learners than partitions
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    n = d.learner_count
    if n < 3:
        raise SplitError(f"{n} learners cannot fill 3 partitions")

    n_valid = max(1, int(round(n * ratios[1])))
    n_test = max(1, int(round(n * ratios[2])))
    n_train = n - n_valid - n_test
    if n_train < 1:
        raise SplitError(f"{n} learners leave no training sequences")

    order = np.random.default_rng(seed).permutation(n)
    seqs = d.sequences
    train = d.subset(seqs[i] for i in order[:n_train])
    valid = d.subset(seqs[i] for i in order[n_train:n_train + n_valid])
    test = d.subset(seqs[i] for i in order[n_train + n_valid:])
    logger.info("Split %d learners into %d/%d/%d", n, n_train, n_valid, n_test)
    return train, valid, test


@dataclass(frozen=True)
class SolutionBank:
    """Embeddings of accepted training submissions, per question."""

    entries: Mapping[int, torch.Tensor] = field(default_factory=dict)

    def __contains__(self, question_id: int) -> bool:
        return question_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, question_id: int) -> Optional[torch.Tensor]:
        return self.entries.get(question_id)


def build_solution_bank(train: Dataset, enc) -> SolutionBank:
    """Collect the embedding of every accepted submission in the training split."""
    collected: Dict[int, List[torch.Tensor]] = {}
    for seq in train.sequences:
        for rec in seq.records:
            if rec.r == 1:
                collected.setdefault(rec.question_id, []).append(
                    torch.as_tensor(enc.encode(rec.code), dtype=DTYPE)
                )
    entries = {q: torch.stack(vectors) for q, vectors in sorted(collected.items())}
    logger.info(
        "Solution bank covers %d questions with %d accepted codes",
        len(entries), sum(len(v) for v in entries.values()),
    )
    return SolutionBank(entries)
