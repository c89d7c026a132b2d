"""Per-learner code graphs: weighted-cosine metric, rank threshold, components, hops."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _scipy_components
from scipy.sparse.csgraph import shortest_path

from src.numerics import cosine_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CodeGraph:
    """Binary symmetric adjacency over a learner's codes; node i is step ``steps[i]``."""

    adjacency: np.ndarray
    steps: Tuple[int, ...]
    isolated: FrozenSet[int] = field(init=False)
    components: Tuple[Tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (len(self.steps), len(self.steps)):
            raise ValueError(f"adjacency shape {adj.shape} does not match {len(self.steps)} nodes")
        adj = adj.copy()
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        degree = adj.sum(axis=1)
        object.__setattr__(self, "isolated", frozenset(int(i) for i in np.flatnonzero(degree == 0)))
        object.__setattr__(self, "components", connected_components(adj))

    @property
    def n(self) -> int:
        return len(self.steps)

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum())

    def neighbors(self, i: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def edge_count(self) -> int:
        return int(np.triu(self.adjacency, k=1).sum())

    def edges(self) -> List[Tuple[int, int]]:
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(i), int(j)) for i, j in zip(rows, cols)]

    def with_edges(self, extra: Sequence[Tuple[int, int]]) -> "CodeGraph":
        adj = self.adjacency.copy()
        for i, j in extra:
            adj[i, j] = adj[j, i] = True
        return CodeGraph(adj, self.steps)

    def without_nodes(self, removed: Set[int]) -> Tuple["CodeGraph", List[int]]:
        """Induced subgraph on the kept nodes, plus the kept original indices."""
        kept = [i for i in range(self.n) if i not in removed]
        adj = self.adjacency[np.ix_(kept, kept)]
        return CodeGraph(adj, tuple(self.steps[i] for i in kept)), kept


def metric_matrix(embeddings: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """M[i][j] = cosine(W * x_i, W * x_j)."""
    weighted = embeddings * W
    return cosine_matrix(weighted, weighted)


def epsilon_for(n: int, p: float) -> int:
    """Edge budget ceil(p * n^2), clamped to the strict upper triangle."""
    upper = n * (n - 1) // 2
    return max(1, min(math.ceil(p * n * n), upper)) if upper else 1


def build_adjacency(M: Union[np.ndarray, torch.Tensor], epsilon: int, steps: Optional[Sequence[int]] = None) -> CodeGraph:
    """
    Keep every pair whose metric reaches the epsilon-th largest strict-upper entry.

    Ties at the threshold are all kept; an epsilon larger than the number of
    pairs connects everything.
    """
    if epsilon < 1:
        raise ValueError(f"epsilon must be >= 1, got {epsilon}")
    m = M.detach().cpu().numpy() if isinstance(M, torch.Tensor) else np.asarray(M, dtype=np.float64)
    n = m.shape[0]
    steps = tuple(steps) if steps is not None else tuple(range(1, n + 1))
    if n < 2:
        return CodeGraph(np.zeros((n, n), dtype=bool), steps)

    rows, cols = np.triu_indices(n, k=1)
    upper = m[rows, cols]
    ranked = np.sort(upper)[::-1]
    tau = ranked[min(epsilon, ranked.size) - 1]
    keep = upper >= tau
    adj = np.zeros((n, n), dtype=bool)
    adj[rows[keep], cols[keep]] = True
    adj |= adj.T
    return CodeGraph(adj, steps)


def connected_components(adjacency: np.ndarray) -> Tuple[Tuple[int, ...], ...]:
    """Components as sorted node tuples, ordered by their smallest node."""
    n = adjacency.shape[0]
    if n == 0:
        return ()
    _, labels = _scipy_components(csr_matrix(adjacency), directed=False)
    groups = {}
    for node, label in enumerate(labels):
        groups.setdefault(int(label), []).append(node)
    return tuple(sorted((tuple(g) for g in groups.values()), key=lambda g: g[0]))


def k_hop_neighborhood(g: CodeGraph, i: int, k: int) -> Set[int]:
    """Nodes within k hops of i, excluding i."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if g.degree(i) == 0:
        return set()
    dist = shortest_path(csr_matrix(g.adjacency), directed=False, unweighted=True, indices=i)
    return {int(j) for j in np.flatnonzero(dist <= k) if j != i}


def hop_distances(g: CodeGraph) -> np.ndarray:
    """All-pairs hop counts (inf between components)."""
    if g.n == 0:
        return np.zeros((0, 0))
    return shortest_path(csr_matrix(g.adjacency), directed=False, unweighted=True)


def dump_edges(g: CodeGraph, path: Union[str, Path]) -> None:
    """Edge list with 1-based step labels, one 'i j' pair per line."""
    lines = [f"{g.steps[i]} {g.steps[j]}\n" for i, j in g.edges()]
    Path(path).write_text("".join(lines), encoding="utf-8")
