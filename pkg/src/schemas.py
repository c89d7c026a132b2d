from typing import List, Literal, Optional, Union

from pydantic import BaseModel, Field, PositiveInt, field_validator, model_validator

LEARNING_RATE_GRID = (1e-3, 1e-2, 1e-1)
SPARSITY_GRID = (0.2, 0.4, 0.5, 0.6, 0.8)
CLUSTER_GRID = (1, 3, 5)

# Coda variants with one component switched off
ABLATIONS = {
    "w/o iso": {"use_isolation": False},
    "w/o sim": {"use_solution_similarity": False},
    "w/o uw": {"identify_unwanted": False},
    "w/o gcn": {"use_gcn": False},
    "w/o weak": {"weak_loss": False},
    "w/o nav": {"nav_weight": 0.0},
}


def _on_grid(value: float, grid: tuple) -> bool:
    return any(abs(value - g) <= 1e-12 * max(1.0, abs(g)) for g in grid)


class SubmissionLine(BaseModel):
    """One line of the JSONL dataset."""

    learner: str
    step: Optional[int] = None
    timestamp: Optional[Union[float, str]] = None
    question: int
    concept: int
    code: str
    verdict: str

    @model_validator(mode="after")
    def _needs_ordering_key(self):
        if self.step is None and self.timestamp is None:
            raise ValueError("record needs a 'step' or 'timestamp' field")
        return self


class EncoderConfig(BaseModel):
    kind: Literal["hash", "file"] = "hash"
    dim: PositiveInt = 32
    path: Optional[str] = None
    keys_path: Optional[str] = None

    @model_validator(mode="after")
    def _file_needs_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("file encoder needs 'path'")
        return self


class BackboneConfig(BaseModel):
    epochs: PositiveInt = 30
    learning_rate: float = 1e-2
    batch_size: PositiveInt = 32
    seed: int = 0
    d_in: Optional[PositiveInt] = None
    d_q: PositiveInt = 16
    d_h: Optional[PositiveInt] = None
    patience: PositiveInt = 10
    allow_off_grid: bool = False

    @model_validator(mode="after")
    def _check_grid(self):
        if not self.allow_off_grid and not _on_grid(self.learning_rate, LEARNING_RATE_GRID):
            raise ValueError(f"learning_rate {self.learning_rate} not in {LEARNING_RATE_GRID}")
        return self


class CodaConfig(BaseModel):
    epochs: PositiveInt = 20
    learning_rate: float = 1e-2
    batch_size: PositiveInt = 32
    seed: int = 0
    clusters: PositiveInt = 1
    # "question": C_k clusters per distinct question among the kept steps; "sequence": C_k in total
    cluster_scope: Literal["question", "sequence"] = "question"
    gcn_layers: PositiveInt = 2
    hops: PositiveInt = 2
    sparsity: float = Field(default=0.2, gt=0.0, le=1.0)
    rank: Optional[PositiveInt] = None
    nav_weight: float = Field(default=1.0, ge=0.0)
    nav_update: Literal["joint", "sequential"] = "joint"
    patience: PositiveInt = 10
    # Ablation switches
    use_isolation: bool = True
    use_solution_similarity: bool = True
    identify_unwanted: bool = True
    use_gcn: bool = True
    weak_loss: bool = True
    allow_off_grid: bool = False

    @model_validator(mode="after")
    def _check_grid(self):
        if self.allow_off_grid:
            return self
        if not _on_grid(self.learning_rate, LEARNING_RATE_GRID):
            raise ValueError(f"learning_rate {self.learning_rate} not in {LEARNING_RATE_GRID}")
        if not _on_grid(self.sparsity, SPARSITY_GRID):
            raise ValueError(f"sparsity {self.sparsity} not in {SPARSITY_GRID}")
        if self.clusters not in CLUSTER_GRID:
            raise ValueError(f"clusters {self.clusters} not in {CLUSTER_GRID}")
        return self


class SynthConfig(BaseModel):
    learners: PositiveInt = 200
    questions: PositiveInt = 50
    concepts: PositiveInt = 20
    mean_length: PositiveInt = 30
    unwanted_rate: float = Field(default=0.1, ge=0.0, le=1.0)
    weak_rate: float = Field(default=0.3, ge=0.0, le=1.0)
    dim: PositiveInt = 32
    margin: float = Field(default=1.0, gt=0.0)
    perturbation_radius: float = Field(default=0.1, ge=0.0)
    core_noise: float = Field(default=1.0, ge=0.0)
    learning_gain: float = Field(default=0.35, ge=0.0)
    short_solution_rate: float = Field(default=0.25, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _leave_room_for_cores(self):
        if self.unwanted_rate + self.weak_rate > 0.9:
            raise ValueError("unwanted_rate + weak_rate must be <= 0.9")
        if self.concepts > self.questions:
            raise ValueError("every concept needs at least one question")
        return self


class ExperimentConfig(BaseModel):
    dataset: Optional[str] = None
    synth: Optional[SynthConfig] = None
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    coda: CodaConfig = Field(default_factory=CodaConfig)
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs"
    sparsity_values: List[float] = Field(default_factory=lambda: list(SPARSITY_GRID))
    ablations: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _one_data_source(self):
        if self.dataset and self.synth:
            raise ValueError("set either 'dataset' or 'synth', not both")
        if not self.dataset and self.synth is None:
            self.synth = SynthConfig()
        if not self.seeds:
            raise ValueError("'seeds' must not be empty")
        return self

    @field_validator("ablations")
    @classmethod
    def _known_ablations(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in ABLATIONS]
        if unknown:
            raise ValueError(f"unknown ablations {unknown}; choose from {sorted(ABLATIONS)}")
        return value
