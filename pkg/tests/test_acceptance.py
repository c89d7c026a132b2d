"""Desk-scale benchmark checks over several seeds; run with ``pytest -m slow``."""

import numpy as np
import pytest

from src.schemas import BackboneConfig, CodaConfig, ExperimentConfig, SynthConfig
from src.services.experiment import run_experiment

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def benchmark_report(tmp_path_factory):
    cfg = ExperimentConfig(
        synth=SynthConfig(margin=1.0, perturbation_radius=0.1),
        backbone=BackboneConfig(epochs=30),
        coda=CodaConfig(epochs=20, clusters=1),
        seeds=SEEDS,
        ablations=["w/o weak", "w/o uw"],
        output_dir=str(tmp_path_factory.mktemp("acceptance")),
    )
    return run_experiment(cfg)


def test_unwanted_codes_are_identified(benchmark_report):
    f1 = [run["identification"]["unwanted"]["f1"] for run in benchmark_report["runs"]]
    assert np.mean(f1) >= 0.85


def test_weak_codes_are_recalled(benchmark_report):
    recall = [run["identification"]["weak"]["recall"] for run in benchmark_report["runs"]]
    assert np.mean(recall) >= 0.70


def test_weak_codes_are_identified(benchmark_report):
    f1 = [run["identification"]["weak"]["f1"] for run in benchmark_report["runs"]]
    assert np.mean(f1) >= 0.70


def test_correction_steadies_weak_steps(benchmark_report):
    raw = [run["weak_stability"]["raw"] for run in benchmark_report["runs"]]
    corrected = [run["weak_stability"]["corrected"] for run in benchmark_report["runs"]]
    assert np.mean(corrected) <= np.mean(raw)


def test_tuning_improves_auc(benchmark_report):
    gain = benchmark_report["aggregate"]["auc_gain"]
    assert gain["mean"] >= 0.01
    assert gain["min"] >= -0.005


def test_ablations_lower_auc(benchmark_report):
    aggregate = benchmark_report["aggregate"]
    full = aggregate["coda"]["auc"]["mean"]
    assert aggregate["w/o weak"]["auc"]["mean"] < full
    assert aggregate["w/o uw"]["auc"]["mean"] < full
