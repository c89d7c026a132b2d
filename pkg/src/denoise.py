"""Noisy-signal identification: unwanted codes, cluster-aware GCN, k-means roles."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus
from torch import nn

from src.data import LearnerSequence, SolutionBank
from src.errors import ContractViolation
from src.graph import CodeGraph, build_adjacency, epsilon_for, hop_distances, metric_matrix
from src.numerics import DTYPE, cosine_matrix
from src.schemas import CodaConfig

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 50


class Role(str, Enum):
    UNWANTED = "unwanted"
    CORE = "core"
    WEAK = "weak"


@dataclass(frozen=True)
class StepRole:
    step: int
    role: Role
    cluster: Optional[int] = None
    core_step: Optional[int] = None

    def to_dict(self, learner_id: str) -> Dict:
        return {
            "learner": learner_id,
            "step": self.step,
            "role": self.role.value,
            "cluster": self.cluster,
            "core_step": self.core_step,
        }


@dataclass(frozen=True, eq=False)
class NoiseAnnotation:
    learner_id: str
    roles: Tuple[StepRole, ...]
    graph: Optional[CodeGraph] = None
    relinked: Optional[CodeGraph] = None

    def __post_init__(self):
        cores = {}
        for sr in self.roles:
            if sr.role is Role.CORE:
                if sr.cluster in cores:
                    raise ContractViolation(f"cluster {sr.cluster} has two cores")
                cores[sr.cluster] = sr.step
        for sr in self.roles:
            if sr.role is Role.WEAK:
                core = cores.get(sr.cluster)
                if core is None or core != sr.core_step or core >= sr.step:
                    raise ContractViolation(f"weak step {sr.step} does not follow the core of cluster {sr.cluster}")

    def __len__(self) -> int:
        return len(self.roles)

    def role_at(self, step: int) -> StepRole:
        return self.roles[step - 1]

    @property
    def unwanted_steps(self) -> List[int]:
        return [sr.step for sr in self.roles if sr.role is Role.UNWANTED]

    @property
    def weak_steps(self) -> List[int]:
        return [sr.step for sr in self.roles if sr.role is Role.WEAK]

    def same_labels(self, other: "NoiseAnnotation") -> bool:
        return self.learner_id == other.learner_id and self.roles == other.roles


class DenoiseParams(nn.Module):
    """W (metric weights), W_a (GCN transform), W_c and the attention network."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.W = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.W_a = nn.Linear(dim, dim, bias=False)
        self.W_c = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.attention = nn.Sequential(nn.Linear(3 * dim, dim), nn.Tanh(), nn.Linear(dim, 1))
        self.to(DTYPE)
        for module in (self.W_a, self.attention[0], self.attention[2]):
            nn.init.xavier_uniform_(module.weight)
            if getattr(module, "bias", None) is not None:
                nn.init.zeros_(module.bias)

    def attention_scores(self, x_i: torch.Tensor, context: torch.Tensor, x_j: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.W_c * x_i, self.W_c * context, self.W_c * x_j], dim=-1)
        return torch.sigmoid(self.attention(feats)).squeeze(-1)


def _median_exceeds_mean(similarities: np.ndarray) -> bool:
    return float(np.mean(similarities)) < float(np.median(similarities))


def identify_unwanted(
    g: CodeGraph,
    embeddings: torch.Tensor,
    questions: Sequence[int],
    bank: SolutionBank,
    W: torch.Tensor,
    use_isolation: bool = True,
    use_solution_similarity: bool = True,
) -> Tuple[FrozenSet[int], CodeGraph]:
    """
    Flag isolated codes whose similarity to the question's solutions is left-skewed.

    A node is unwanted iff it is isolated and mean(S_i) < median(S_i), where
    S_i holds its weighted cosine to every banked solution of its question.
    Fewer than two solutions means the node cannot be judged and stays.
    Unwanted nodes are dropped and every remaining degree-0 node is linked to
    its most similar connected node (ties to the earlier step).

    Returns:
        (unwanted node indices of ``g``, relinked graph over the kept nodes)
    """
    with torch.no_grad():
        weighted = embeddings * W
        candidates = sorted(g.isolated) if use_isolation else list(range(g.n))
        unwanted: Set[int] = set()
        for i in candidates:
            if not use_solution_similarity:
                if i in g.isolated:
                    unwanted.add(i)
                continue
            solutions = bank.get(questions[i])
            if solutions is None or solutions.shape[0] <= 1:
                continue
            sims = cosine_matrix(weighted[i:i + 1], solutions * W)[0].numpy()
            if _median_exceeds_mean(sims):
                unwanted.add(i)

        remaining, kept = g.without_nodes(unwanted)
        return frozenset(unwanted), relink_isolated(remaining, weighted[kept])


def relink_isolated(g: CodeGraph, weighted: torch.Tensor) -> CodeGraph:
    """Attach each degree-0 node to its most cosine-similar connected node."""
    if g.n < 2 or not g.isolated:
        return g
    with torch.no_grad():
        sim = cosine_matrix(weighted, weighted).numpy()
    connected = [j for j in range(g.n) if j not in g.isolated]
    links = []
    for i in sorted(g.isolated):
        targets = connected or [j for j in range(g.n) if j != i]
        links.append((i, targets[int(np.argmax(sim[i, targets]))]))
    return g.with_edges(links)


def cluster_gcn(
    g: CodeGraph,
    X: torch.Tensor,
    params: DenoiseParams,
    layers: int = 2,
    hops: int = 2,
) -> torch.Tensor:
    """
    Cluster-aware mean-aggregation GCN with a residual to the raw embedding.

    x0 = W * x; x_l = sigmoid(W_a . mean_j(alpha_ij * x_{l-1, j})); out = x_L + x.
    alpha_ij scores neighbour j of i against the mean of i's k-hop cluster
    (i included). Adjacency and hop masks are block diagonal, so one pass
    equals running every component separately.
    """
    if layers < 1:
        raise ValueError(f"layers must be >= 1, got {layers}")
    n = g.n
    if n == 0:
        return X.new_zeros((0, params.dim))
    if n == 1:
        return params.W * X + X
    degree = g.adjacency.sum(axis=1)
    if (degree == 0).any():
        raise ContractViolation(f"nodes {np.flatnonzero(degree == 0).tolist()} reached the GCN without neighbours")

    adj = torch.tensor(g.adjacency, dtype=DTYPE)
    cluster = torch.tensor(hop_distances(g) <= hops, dtype=DTYPE)
    context = (cluster @ X) / cluster.sum(dim=1, keepdim=True)

    x_i = X.unsqueeze(1).expand(n, n, -1)
    x_j = X.unsqueeze(0).expand(n, n, -1)
    ctx = context.unsqueeze(1).expand(n, n, -1)
    alpha = params.attention_scores(x_i, ctx, x_j) * adj
    deg = adj.sum(dim=1, keepdim=True)

    h = params.W * X
    for _ in range(layers):
        h = torch.sigmoid(params.W_a((alpha @ h) / deg))
    return h + X


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: List[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.inertia_history)


def kmeans(X: np.ndarray, n_clusters: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER) -> KMeansResult:
    """
    Lloyd iterations from a seeded k-means++ start.

    Stops at an assignment fixpoint or after max_iter rounds; n_clusters is
    clamped to the number of points, and n_clusters >= n gives singletons.
    """
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        return KMeansResult(np.zeros(0, dtype=np.int64), np.zeros((0,) + X.shape[1:]))
    k = min(n_clusters, n)
    if k == n:
        return KMeansResult(np.arange(n), X.copy(), [0.0])

    centroids, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed)
    centroids = centroids.astype(np.float64)
    labels = None
    history: List[float] = []
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for c in range(k):
            members = X[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return KMeansResult(labels, centroids, history)


def build_graph(
    embeddings: torch.Tensor,
    steps: Sequence[int],
    params: DenoiseParams,
    sparsity: float,
) -> CodeGraph:
    with torch.no_grad():
        M = metric_matrix(embeddings, params.W)
    return build_adjacency(M, epsilon_for(len(steps), sparsity), steps)


def node_features(
    relinked: CodeGraph,
    embeddings: torch.Tensor,
    params: DenoiseParams,
    config: CodaConfig,
) -> torch.Tensor:
    """
    Post-GCN embedding x' for every step of the sequence.

    Nodes of ``relinked`` go through the GCN (or W*x + x without it); steps
    missing from it, the unwanted ones, keep their raw embedding. The result
    is differentiable in ``params`` for a fixed graph.
    """
    kept = [step - 1 for step in relinked.steps]
    if not kept:
        return embeddings.clone()
    X = embeddings[kept]
    if config.use_gcn:
        feats = cluster_gcn(relinked, X, params, config.gcn_layers, config.hops)
    else:
        feats = params.W * X + X
    position = {idx: row for row, idx in enumerate(kept)}
    rows = [feats[position[i]] if i in position else embeddings[i] for i in range(embeddings.shape[0])]
    return torch.stack(rows)


def step_features(
    annotation: "NoiseAnnotation",
    embeddings: torch.Tensor,
    params: DenoiseParams,
    config: CodaConfig,
) -> torch.Tensor:
    return node_features(annotation.relinked, embeddings[: len(annotation)], params, config)


def assign_roles(steps: Sequence[int], kept: Sequence[int], labels: Sequence[int]) -> List[StepRole]:
    """Core = earliest step of each cluster; cluster ids renumbered by core step."""
    first_step: Dict[int, int] = {}
    for idx, label in zip(kept, labels):
        first_step.setdefault(int(label), steps[idx])
    order = sorted(first_step, key=first_step.get)
    renumber = {label: cid for cid, label in enumerate(order)}

    roles = []
    for idx, label in zip(kept, labels):
        core = first_step[int(label)]
        cid = renumber[int(label)]
        if steps[idx] == core:
            roles.append(StepRole(steps[idx], Role.CORE, cid))
        else:
            roles.append(StepRole(steps[idx], Role.WEAK, cid, core))
    return roles


def cluster_count(config: CodaConfig, questions: Sequence[int]) -> int:
    """k for one learner: C_k, or C_k per distinct question under the question scope."""
    if config.cluster_scope == "question":
        return config.clusters * max(1, len(set(questions)))
    return config.clusters


def annotate_sequence(
    seq: LearnerSequence,
    embeddings: torch.Tensor,
    bank: SolutionBank,
    params: DenoiseParams,
    config: CodaConfig,
    seed: Optional[int] = None,
) -> NoiseAnnotation:
    """
    Graph -> unwanted -> GCN -> k-means over every non-unwanted node.

    k-means runs once over all kept nodes; only its k depends on the
    cluster scope.

    The discrete outcome (graph, roles) is computed without gradients; the
    trainer recomputes features differentiably on ``annotation.relinked``.
    """
    seed = config.seed if seed is None else seed
    embeddings = embeddings[: seq.length]
    steps = [rec.step for rec in seq.records]
    graph = build_graph(embeddings, steps, params, config.sparsity)

    if config.identify_unwanted:
        unwanted, relinked = identify_unwanted(
            graph, embeddings, seq.questions, bank, params.W,
            use_isolation=config.use_isolation,
            use_solution_similarity=config.use_solution_similarity,
        )
    else:
        unwanted = frozenset()
        with torch.no_grad():
            relinked = relink_isolated(graph, embeddings * params.W)

    roles: List[Optional[StepRole]] = [None] * len(steps)
    for i in unwanted:
        roles[i] = StepRole(steps[i], Role.UNWANTED)

    kept = [step - 1 for step in relinked.steps]
    if kept:
        with torch.no_grad():
            feats = node_features(relinked, embeddings, params, config)
        result = kmeans(feats[kept].numpy(), cluster_count(config, [seq.questions[i] for i in kept]), seed)
        for sr in assign_roles(steps, kept, result.labels):
            roles[sr.step - 1] = sr

    annotation = NoiseAnnotation(seq.learner_id, tuple(roles), graph, relinked)
    logger.debug(
        "Learner %s: %d unwanted, %d weak of %d steps",
        seq.learner_id, len(annotation.unwanted_steps), len(annotation.weak_steps), seq.length,
    )
    return annotation
