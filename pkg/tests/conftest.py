import json

import numpy as np
import pytest
import torch

from src.backbone import BackboneDims, train_backbone
from src.data import Dataset, LearnerSequence, SubmissionRecord, build_solution_bank, split_dataset
from src.encoder import FileEmbeddingProvider
from src.schemas import BackboneConfig, CodaConfig, SynthConfig
from src.services.synth import generate


def make_sequence(learner_id, questions, outcomes=None, concepts=None, codes=None):
    outcomes = outcomes if outcomes is not None else [1] * len(questions)
    concepts = concepts if concepts is not None else [0] * len(questions)
    codes = codes if codes is not None else [f"{learner_id}:{t}" for t in range(1, len(questions) + 1)]
    records = tuple(
        SubmissionRecord(
            step=t,
            question_id=q,
            concept_id=c,
            code=code,
            feedback="Accepted" if r else "Wrong Answer",
            r=r,
        )
        for t, (q, c, code, r) in enumerate(zip(questions, concepts, codes, outcomes), start=1)
    )
    return LearnerSequence(learner_id, records)


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(rows, name="data.jsonl"):
        path = tmp_path / name
        path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(learners=30, questions=6, concepts=3, mean_length=8, dim=8, seed=0)


@pytest.fixture
def tiny_benchmark(tiny_synth_config):
    return generate(tiny_synth_config)


@pytest.fixture
def tiny_splits(tiny_benchmark):
    dataset, _, provider = tiny_benchmark
    train, valid, test = split_dataset(dataset, seed=0)
    return train, valid, test, provider


@pytest.fixture
def backbone_config():
    return BackboneConfig(epochs=2, batch_size=8, d_q=4, d_h=8, seed=0)


@pytest.fixture
def coda_config():
    return CodaConfig(epochs=1, batch_size=8, seed=0, clusters=1, sparsity=0.2)


@pytest.fixture
def trained_backbone(tiny_splits, backbone_config):
    train, valid, _, provider = tiny_splits
    return train_backbone(train, valid, backbone_config, provider).model


@pytest.fixture
def tiny_bank(tiny_splits):
    train, _, _, provider = tiny_splits
    return build_solution_bank(train, provider)


@pytest.fixture
def small_instance():
    """d=8, d_h=8, one 5-step learner with random embeddings."""
    gen = np.random.default_rng(7)
    seq = make_sequence("g0", questions=[0, 1, 0, 2, 1], outcomes=[0, 1, 0, 1, 1], concepts=[0, 1, 0, 1, 1])
    vectors = {rec.code: gen.normal(size=8) for rec in seq.records}
    for j in range(3):
        vectors[f"sol:{j}"] = gen.normal(size=8)
    provider = FileEmbeddingProvider(vectors, 8)
    dataset = Dataset((seq,), question_count=3, concept_count=2)
    dims = BackboneDims(code_dim=8, d_in=8, d_q=4, d_h=8, questions=3, concepts=2)
    torch.manual_seed(0)
    return seq, dataset, provider, dims


@pytest.fixture
def sequence_factory():
    return make_sequence
