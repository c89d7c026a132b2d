import pytest
import torch

from src.data import (
    Dataset,
    build_solution_bank,
    load_dataset,
    save_dataset,
    split_dataset,
    verdict_to_outcome,
)
from src.encoder import HashEmbeddingProvider
from src.errors import DatasetParseError, SchemaError, SplitError


def _rows(learner, n, verdict="Accepted", question=0):
    return [
        {"learner": learner, "step": t, "question": question, "concept": 0, "code": f"x = {t}", "verdict": verdict}
        for t in range(1, n + 1)
    ]


def _dataset(sequence_factory, n):
    return Dataset(tuple(sequence_factory(f"l{i}", [0]) for i in range(n)), 1, 1)


def test_load_drops_short_learners(write_jsonl):
    path = write_jsonl(_rows("a", 6) + _rows("b", 4))
    dataset = load_dataset(path)
    assert dataset.learner_count == 1
    assert dataset.sequences[0].learner_id == "a"
    assert dataset.sequences[0].length == 6


def test_load_empty_file(write_jsonl):
    path = write_jsonl([])
    with pytest.raises(DatasetParseError, match="no sequences"):
        load_dataset(path)


def test_load_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = '{"learner": "a", "step": 1, "question": 0, "concept": 0, "code": "", "verdict": "Accepted"}'
    path.write_text(good + "\n{not json\n", encoding="utf-8")
    with pytest.raises(DatasetParseError) as exc:
        load_dataset(path)
    assert exc.value.line_number == 2
    assert "line 2" in str(exc.value)


def test_load_requires_step_or_timestamp(write_jsonl):
    row = {"learner": "a", "question": 0, "concept": 0, "code": "", "verdict": "Accepted"}
    path = write_jsonl([row])
    with pytest.raises(DatasetParseError) as exc:
        load_dataset(path)
    assert exc.value.line_number == 1


def test_load_orders_by_timestamp_and_renumbers(write_jsonl):
    rows = [
        {"learner": "a", "timestamp": ts, "question": q, "concept": 0, "code": f"c{q}", "verdict": "Accepted"}
        for ts, q in [(50, 4), (10, 0), (30, 2), (20, 1), (40, 3)]
    ]
    dataset = load_dataset(write_jsonl(rows))
    seq = dataset.sequences[0]
    assert [rec.step for rec in seq.records] == [1, 2, 3, 4, 5]
    assert seq.questions == [0, 1, 2, 3, 4]


def test_load_maps_verdicts(write_jsonl):
    rows = _rows("a", 5)
    rows[1]["verdict"] = "Wrong Answer"
    rows[3]["verdict"] = "accepted"
    seq = load_dataset(write_jsonl(rows)).sequences[0]
    assert seq.outcomes == [1, 0, 1, 0, 1]
    assert all((rec.r == 1) == (rec.feedback == "Accepted") for rec in seq.records)


def test_load_rejects_ids_outside_declared_counts(write_jsonl):
    path = write_jsonl(_rows("a", 5, question=7))
    with pytest.raises(SchemaError):
        load_dataset(path, question_count=5)


def test_verdict_to_outcome():
    assert verdict_to_outcome("Accepted") == 1
    assert verdict_to_outcome("Compile Error") == 0
    assert verdict_to_outcome("OK", accepted=frozenset({"OK"})) == 1


@pytest.mark.parametrize("n, sizes", [(10, (7, 1, 2)), (479, (335, 48, 96))])
def test_split_sizes(sequence_factory, n, sizes):
    train, valid, test = split_dataset(_dataset(sequence_factory, n), seed=3)
    assert (train.learner_count, valid.learner_count, test.learner_count) == sizes


def test_split_is_disjoint_exhaustive_and_deterministic(sequence_factory):
    dataset = _dataset(sequence_factory, 25)
    first = split_dataset(dataset, seed=11)
    second = split_dataset(dataset, seed=11)
    ids = [[seq.learner_id for seq in part.sequences] for part in first]
    assert ids == [[seq.learner_id for seq in part.sequences] for part in second]
    flat = [learner for part in ids for learner in part]
    assert sorted(flat) == sorted(seq.learner_id for seq in dataset.sequences)
    assert len(set(flat)) == len(flat)


def test_split_rejects_too_few_learners(sequence_factory):
    with pytest.raises(SplitError):
        split_dataset(_dataset(sequence_factory, 2))


def test_split_rejects_bad_ratios(sequence_factory):
    with pytest.raises(SplitError):
        split_dataset(_dataset(sequence_factory, 10), ratios=(0.5, 0.5, 0.5))


def test_solution_bank_empty_without_accepted(sequence_factory):
    seq = sequence_factory("a", [0, 1, 2], outcomes=[0, 0, 0])
    bank = build_solution_bank(Dataset((seq,), 3, 1), HashEmbeddingProvider(8))
    assert len(bank) == 0


def test_solution_bank_counts_accepted(sequence_factory):
    seq = sequence_factory("a", [0, 0, 0, 1], outcomes=[1, 1, 1, 0], codes=["a", "b", "c", "d"])
    enc = HashEmbeddingProvider(8)
    bank = build_solution_bank(Dataset((seq,), 2, 1), enc)
    assert bank.get(0).shape == (3, 8)
    assert 1 not in bank
    assert torch.equal(bank.get(0)[1], enc.encode("b"))


def test_solution_bank_uses_train_split_only(sequence_factory):
    train_seq = sequence_factory("a", [0, 0], outcomes=[1, 0], codes=["p", "q"])
    test_seq = sequence_factory("b", [1, 1], outcomes=[1, 1], codes=["r", "s"])
    dataset = Dataset((train_seq, test_seq), 2, 1)
    bank = build_solution_bank(dataset.subset([train_seq]), HashEmbeddingProvider(8))
    assert 0 in bank
    assert 1 not in bank


def test_synthetic_round_trip(tmp_path, tiny_benchmark, tiny_synth_config):
    dataset, _, _ = tiny_benchmark
    path = tmp_path / "synth.jsonl"
    save_dataset(dataset, path)
    loaded = load_dataset(
        path,
        question_count=tiny_synth_config.questions,
        concept_count=tiny_synth_config.concepts,
    )
    assert loaded == dataset
