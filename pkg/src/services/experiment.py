"""Experiment orchestration: end-to-end runs, sparsity sweeps, traces and noise exports."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.backbone import Backbone, EncodedCorpus, evaluate, train_backbone
from src.data import Dataset, SolutionBank, build_solution_bank, load_dataset, split_dataset
from src.denoise import NoiseAnnotation, annotate_sequence
from src.encoder import EmbeddingProvider, build_provider
from src.errors import ConfigurationError, SchemaError
from src.graph import dump_edges
from src.schemas import ABLATIONS, SPARSITY_GRID, CodaConfig, ExperimentConfig
from src.services.synth import GroundTruth, generate, score_identification
from src.trainer import Coda, CodaPipeline, coda_evaluate, tune_coda

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
REFERENCE_RESULTS = {
    "source": "published full-scale results on real PKT datasets",
    "status": "not reproduced at desk scale",
    "BePKT": {"Help-DKT": {"auc": 60.10}, "Coda-Help-DKT": {"auc": 62.31}},
}
METRIC_NAMES = ("auc", "f1", "rmse", "accuracy")


@dataclass
class SeedInputs:
    train: Dataset
    valid: Dataset
    test: Dataset
    provider: EmbeddingProvider
    bank: SolutionBank
    truth: Optional[GroundTruth] = None


@dataclass(frozen=True)
class SweepRow:
    p: float
    auc: float
    f1: float
    rmse: float
    accuracy: float
    mean_edges: float


@dataclass(frozen=True)
class TraceRow:
    step: int
    role: str
    raw: float
    corrected: float


def apply_seed_override(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """Force one seed onto every stage; None leaves the config untouched."""
    if seed is None:
        return cfg
    update = {
        "seeds": [seed],
        "backbone": cfg.backbone.model_copy(update={"seed": seed}),
        "coda": cfg.coda.model_copy(update={"seed": seed}),
    }
    if cfg.synth is not None:
        update["synth"] = cfg.synth.model_copy(update={"seed": seed})
    logger.info("Seed overridden to %d", seed)
    return cfg.model_copy(update=update)


def load_inputs(cfg: ExperimentConfig, seed: int) -> Tuple[Dataset, EmbeddingProvider, Optional[GroundTruth]]:
    if cfg.dataset:
        return load_dataset(cfg.dataset), build_provider(cfg.encoder), None
    synth = cfg.synth.model_copy(update={"seed": seed})
    dataset, truth, provider = generate(synth)
    return dataset, provider, truth


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedInputs:
    dataset, provider, truth = load_inputs(cfg, seed)
    train, valid, test = split_dataset(dataset, seed=seed)
    bank = build_solution_bank(train, provider)
    return SeedInputs(train, valid, test, provider, bank, truth)


def annotate_dataset(
    coda: Coda,
    dataset: Dataset,
    enc: EmbeddingProvider,
    bank: SolutionBank,
    config: CodaConfig,
    corpus: Optional[EncodedCorpus] = None,
) -> List[NoiseAnnotation]:
    """Annotate every full sequence with the given parameters."""
    corpus = corpus or EncodedCorpus(enc)
    with torch.no_grad():
        return [
            annotate_sequence(seq, corpus.embeddings(seq), bank, coda.denoise, config, config.seed)
            for seq in dataset.sequences
        ]


def _aggregate(blocks: Sequence[Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    out = {}
    for name in METRIC_NAMES:
        values = np.array([block[name] for block in blocks], dtype=np.float64)
        out[name] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


def _run_seed(
    cfg: ExperimentConfig,
    seed: int,
    dump_graphs: Optional[Path],
) -> Dict:
    inputs = prepare_seed(cfg, seed)
    backbone_cfg = cfg.backbone.model_copy(update={"seed": seed})
    backbone = train_backbone(inputs.train, inputs.valid, backbone_cfg, inputs.provider).model
    entry: Dict = {
        "seed": seed,
        "split": {
            "train": inputs.train.learner_count,
            "valid": inputs.valid.learner_count,
            "test": inputs.test.learner_count,
        },
        "backbone": evaluate(backbone, inputs.test, inputs.provider).to_dict(),
        "ablations": {},
    }

    variants = [("coda", {})] + [(name, ABLATIONS[name]) for name in cfg.ablations]
    for name, overrides in variants:
        coda_cfg = cfg.coda.model_copy(update={**overrides, "seed": seed})
        tuned = tune_coda(backbone, inputs.train, inputs.valid, coda_cfg, inputs.provider, inputs.bank)
        metrics = coda_evaluate(
            backbone, tuned.coda, inputs.test, inputs.provider, inputs.bank, coda_cfg
        ).to_dict()
        if name != "coda":
            entry["ablations"][name] = metrics
            continue

        entry["coda"] = metrics
        entry["best_epoch"] = tuned.best_epoch
        raw_change, fixed_change = state_stability(
            backbone, tuned.coda, inputs.test, inputs.provider, inputs.bank, coda_cfg
        )
        entry["weak_stability"] = {"raw": raw_change, "corrected": fixed_change}
        if dump_graphs is not None:
            dump_graph_files(tuned.annotations.values(), dump_graphs / f"seed{seed}")
        if inputs.truth is not None:
            annotations = annotate_dataset(tuned.coda, inputs.test, inputs.provider, inputs.bank, coda_cfg)
            scores = score_identification(annotations, inputs.truth)
            entry["identification"] = {role: asdict(score) for role, score in scores.items()}

    logger.info(
        "Seed %d: backbone AUC %.4f, coda AUC %.4f",
        seed, entry["backbone"]["auc"], entry["coda"]["auc"],
    )
    return entry


def run_experiment(cfg: ExperimentConfig, dump_graphs: Optional[Union[str, Path]] = None) -> Dict:
    """
    Train the backbone, tune Coda and evaluate both on the test split, per seed.

    The report embeds the config, every per-seed block and mean/std
    aggregates, and is written to ``<output_dir>/report.json``.
    """
    dump_dir = Path(dump_graphs) if dump_graphs else None
    runs = [_run_seed(cfg, seed, dump_dir) for seed in cfg.seeds]

    aggregate = {
        "backbone": _aggregate([run["backbone"] for run in runs]),
        "coda": _aggregate([run["coda"] for run in runs]),
    }
    for name in cfg.ablations:
        aggregate[name] = _aggregate([run["ablations"][name] for run in runs])
    aggregate["auc_gain"] = {
        "mean": float(np.mean([run["coda"]["auc"] - run["backbone"]["auc"] for run in runs])),
        "min": float(np.min([run["coda"]["auc"] - run["backbone"]["auc"] for run in runs])),
    }

    report = {
        "config": cfg.model_dump(),
        "runs": runs,
        "aggregate": aggregate,
        "metadata": {"reference_results": REFERENCE_RESULTS},
    }
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_NAME).write_text(dumps_report(report), encoding="utf-8")
    logger.info("Report written to %s", out / REPORT_NAME)
    return report


def dumps_report(report: Dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def sparsity_sweep(
    cfg: ExperimentConfig,
    p_values: Optional[Sequence[float]] = None,
    out_path: Optional[Union[str, Path]] = None,
) -> List[SweepRow]:
    """
    One tuned evaluation per sparsity value, everything else fixed.

    The backbone is trained once; ``mean_edges`` is the mean upper-triangle
    edge count of the test learners' graphs under the tuned parameters.
    """
    p_values = list(p_values if p_values is not None else cfg.sparsity_values or SPARSITY_GRID)
    seed = cfg.seeds[0]
    inputs = prepare_seed(cfg, seed)
    backbone_cfg = cfg.backbone.model_copy(update={"seed": seed})
    backbone = train_backbone(inputs.train, inputs.valid, backbone_cfg, inputs.provider).model

    rows = []
    for p in p_values:
        coda_cfg = cfg.coda.model_copy(update={"sparsity": float(p), "seed": seed})
        tuned = tune_coda(backbone, inputs.train, inputs.valid, coda_cfg, inputs.provider, inputs.bank)
        metrics = coda_evaluate(backbone, tuned.coda, inputs.test, inputs.provider, inputs.bank, coda_cfg)
        annotations = annotate_dataset(tuned.coda, inputs.test, inputs.provider, inputs.bank, coda_cfg)
        mean_edges = float(np.mean([a.graph.edge_count() for a in annotations])) if annotations else 0.0
        rows.append(SweepRow(float(p), metrics.auc, metrics.f1, metrics.rmse, metrics.accuracy, mean_edges))
        logger.info("Sparsity %.2f: AUC %.4f, mean edges %.1f", p, metrics.auc, mean_edges)

    if out_path is not None:
        write_csv(out_path, [asdict(row) for row in rows])
    return rows


def export_trace(
    backbone: Backbone,
    coda: Coda,
    dataset: Dataset,
    learner_id: str,
    concept: int,
    enc: EmbeddingProvider,
    bank: SolutionBank,
    config: CodaConfig,
) -> List[TraceRow]:
    """
    Proficiency on one state coordinate, raw and corrected, at every step.

    Proficiency is sigmoid(h[concept]); corrected values rebuild the graph
    over each observed prefix, as at test time.

    Raises:
        SchemaError: Unknown learner
        ConfigurationError: concept outside [0, d_h)
    """
    seq = dataset.by_learner().get(learner_id)
    if seq is None:
        raise SchemaError(f"unknown learner {learner_id!r}")
    if not 0 <= concept < backbone.dims.d_h:
        raise ConfigurationError(f"concept coordinate {concept} outside [0, {backbone.dims.d_h})")

    pipeline = CodaPipeline(backbone, coda, config, bank, EncodedCorpus(enc))
    h, corrected, roles = pipeline.prefix_states(seq)
    raw = torch.sigmoid(h[:, concept]).tolist()
    fixed = torch.sigmoid(corrected[:, concept]).tolist()
    return [
        TraceRow(sr.step, sr.role.value, r, c)
        for sr, r, c in zip(roles, raw, fixed)
    ]


def write_csv(path: Union[str, Path], rows: Sequence[Dict]) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_annotations(annotations: Iterable[NoiseAnnotation], path: Union[str, Path]) -> int:
    """One JSON line per step; returns the number of lines written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for annotation in annotations:
            for sr in annotation.roles:
                fh.write(json.dumps(sr.to_dict(annotation.learner_id)) + "\n")
                count += 1
    return count


def dump_graph_files(annotations: Iterable[NoiseAnnotation], out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for annotation in annotations:
        dump_edges(annotation.graph, out / f"{annotation.learner_id}.edges")


def trace_stability(rows: Sequence[TraceRow], role: str = "weak") -> Tuple[float, float]:
    """Mean absolute step-to-step change on steps with the given role, raw and corrected."""
    raw_changes = []
    fixed_changes = []
    for prev, cur in zip(rows, rows[1:]):
        if cur.role == role:
            raw_changes.append(abs(cur.raw - prev.raw))
            fixed_changes.append(abs(cur.corrected - prev.corrected))
    if not raw_changes:
        return math.nan, math.nan
    return float(np.mean(raw_changes)), float(np.mean(fixed_changes))


def state_stability(
    backbone: Backbone,
    coda: Coda,
    dataset: Dataset,
    enc: EmbeddingProvider,
    bank: SolutionBank,
    config: CodaConfig,
    role: str = "weak",
) -> Tuple[float, float]:
    """
    Mean absolute change of sigmoid(h) into steps labelled ``role``, raw and corrected.

    Averages over every state coordinate of every learner in ``dataset``;
    labels come from each step's own prefix.
    """
    pipeline = CodaPipeline(backbone, coda, config, bank, EncodedCorpus(enc))
    raw_changes: List[float] = []
    fixed_changes: List[float] = []
    for seq in dataset.sequences:
        h, corrected, roles = pipeline.prefix_states(seq)
        raw = torch.sigmoid(h)
        fixed = torch.sigmoid(corrected)
        for t in range(1, seq.length):
            if roles[t].role.value == role:
                raw_changes.append(float((raw[t] - raw[t - 1]).abs().mean()))
                fixed_changes.append(float((fixed[t] - fixed[t - 1]).abs().mean()))
    if not raw_changes:
        return math.nan, math.nan
    return float(np.mean(raw_changes)), float(np.mean(fixed_changes))
