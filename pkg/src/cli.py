"""Command-line surface: coda <command> [options]."""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from src.backbone import EncodedCorpus, evaluate, load_backbone, save_backbone, train_backbone
from src.data import build_solution_bank, load_dataset, split_dataset
from src.encoder import build_provider
from src.errors import CodaError, ConfigurationError
from src.schemas import EncoderConfig, ExperimentConfig, SynthConfig
from src.services.experiment import (
    annotate_dataset,
    apply_seed_override,
    dump_graph_files,
    export_trace,
    run_experiment,
    sparsity_sweep,
    write_annotations,
    write_csv,
)
from src.services.synth import generate, save_benchmark
from src.settings import configure_torch, seed_override
from src.trainer import coda_evaluate, load_coda, save_coda, tune_coda

logger = logging.getLogger(__name__)


def load_config(path: Optional[str]) -> ExperimentConfig:
    if not path:
        return ExperimentConfig()
    return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then CODA_SEED, then --dataset/--embeddings/--seed flags."""
    cfg = load_config(getattr(args, "config", None))
    update = {}
    dataset = getattr(args, "dataset", None)
    if dataset:
        update["dataset"] = dataset
        update["synth"] = None
    embeddings = getattr(args, "embeddings", None)
    if embeddings:
        update["encoder"] = EncoderConfig(kind="file", dim=cfg.encoder.dim, path=embeddings)
    if update:
        cfg = cfg.model_copy(update=update)
    cfg = apply_seed_override(cfg, seed_override())
    return apply_seed_override(cfg, getattr(args, "seed", None))


def _splits(cfg: ExperimentConfig):
    if not cfg.dataset:
        raise ConfigurationError("this command needs --dataset (or 'dataset' in the config)")
    dataset = load_dataset(cfg.dataset)
    provider = build_provider(cfg.encoder)
    train, valid, test = split_dataset(dataset, seed=cfg.seeds[0])
    return dataset, provider, train, valid, test


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    dataset, truth, provider = generate(cfg.synth or SynthConfig())
    paths = save_benchmark(dataset, truth, provider, args.out)
    print(json.dumps({name: str(path) for name, path in paths.items()}, indent=2))
    return 0


def cmd_train_backbone(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _, provider, train, valid, test = _splits(cfg)
    result = train_backbone(train, valid, cfg.backbone, provider)
    save_backbone(result.model, args.out)
    metrics = evaluate(result.model, test, provider)
    print(json.dumps({"best_epoch": result.best_epoch, "test": metrics.to_dict()}, indent=2))
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _, provider, train, valid, _ = _splits(cfg)
    backbone = load_backbone(args.backbone)
    bank = build_solution_bank(train, provider)
    result = tune_coda(backbone, train, valid, cfg.coda, provider, bank)
    save_coda(result.coda, cfg.coda, args.out)
    if args.dump_graphs:
        dump_graph_files(result.annotations.values(), args.dump_graphs)
    print(json.dumps({"best_epoch": result.best_epoch}, indent=2))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _, provider, train, _, test = _splits(cfg)
    backbone = load_backbone(args.backbone)
    report = {"backbone": evaluate(backbone, test, provider).to_dict()}
    if args.coda:
        coda, coda_cfg = load_coda(args.coda)
        bank = build_solution_bank(train, provider)
        report["coda"] = coda_evaluate(backbone, coda, test, provider, bank, coda_cfg).to_dict()
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_identify_noise(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    dataset, provider, train, _, _ = _splits(cfg)
    coda, coda_cfg = load_coda(args.model)
    bank = build_solution_bank(train, provider)
    annotations = annotate_dataset(coda, dataset, provider, bank, coda_cfg, EncodedCorpus(provider))
    if args.out:
        count = write_annotations(annotations, args.out)
        logger.info("Wrote %d step annotations to %s", count, args.out)
    else:
        for annotation in annotations:
            for sr in annotation.roles:
                print(json.dumps(sr.to_dict(annotation.learner_id)))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    p_values = [float(p) for p in args.p.split(",")] if args.p else None
    rows = sparsity_sweep(cfg, p_values, args.out)
    if not args.out:
        for row in rows:
            print(json.dumps(asdict(row)))
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    dataset, provider, train, _, _ = _splits(cfg)
    backbone = load_backbone(args.backbone)
    coda, coda_cfg = load_coda(args.coda)
    bank = build_solution_bank(train, provider)
    rows = export_trace(backbone, coda, dataset, args.learner, args.concept, provider, bank, coda_cfg)
    records = [asdict(row) for row in rows]
    if args.out:
        write_csv(args.out, records)
    else:
        for record in records:
            print(json.dumps(record))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    report = run_experiment(cfg, dump_graphs=args.dump_graphs)
    print(json.dumps(report["aggregate"], indent=2, sort_keys=True))
    return 0


def _common(parser: argparse.ArgumentParser, dataset: bool = True) -> None:
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="override every config seed")
    if dataset:
        parser.add_argument("--dataset", help="JSONL submissions")
        parser.add_argument("--embeddings", help="binary embedding file (keys in <path>.keys)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coda", description="Code-graph denoising for programming knowledge tracing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    _common(p, dataset=False)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-backbone", help="train the reference backbone")
    _common(p)
    p.add_argument("--out", required=True, help="backbone checkpoint path")
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("tune", help="tune Coda on a frozen backbone")
    _common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True, help="coda checkpoint path")
    p.add_argument("--dump-graphs", help="directory for <learner>.edges files")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="evaluate backbone (and Coda) on the test split")
    _common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--coda")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("identify-noise", help="emit per-step roles as JSONL")
    _common(p)
    p.add_argument("--model", required=True, help="coda checkpoint path")
    p.add_argument("--out")
    p.set_defaults(func=cmd_identify_noise)

    p = sub.add_parser("sweep", help="sparsity sweep")
    _common(p)
    p.add_argument("--p", help="comma-separated sparsity values")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="proficiency trace for one learner")
    _common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--coda", required=True)
    p.add_argument("--learner", required=True)
    p.add_argument("--concept", type=int, required=True)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("run", help="full experiment with report")
    _common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-graphs", help="directory for <learner>.edges files")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_torch()
    try:
        return args.func(args)
    except (CodaError, ValidationError, FileNotFoundError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
