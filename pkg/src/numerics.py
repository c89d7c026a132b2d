"""Vector primitives, parameter slots and the finite-difference gradient oracle."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Tuple

import torch
from torch import nn

from src.errors import ContractViolation
from utils.hashing import tensor_digest

logger = logging.getLogger(__name__)

DTYPE = torch.float64
KL_FLOOR = 1e-12
NORMALIZATION_TOLERANCE = 1e-6


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; 0 when either has zero norm."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    denom = torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b)
    if denom == 0:
        return torch.zeros((), dtype=a.dtype)
    return torch.dot(a, b) / denom


def cosine_matrix(left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine between the rows of two matrices, zero rows giving 0."""
    left_norm = torch.linalg.vector_norm(left, dim=1, keepdim=True)
    right_norm = torch.linalg.vector_norm(right, dim=1, keepdim=True)
    left_unit = torch.where(left_norm > 0, left / left_norm.clamp_min(1e-300), torch.zeros_like(left))
    right_unit = torch.where(right_norm > 0, right / right_norm.clamp_min(1e-300), torch.zeros_like(right))
    return (left_unit @ right_unit.T).clamp(-1.0, 1.0)


def softmax(v: torch.Tensor) -> torch.Tensor:
    return torch.softmax(v, dim=-1)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """
    KL(p || q) for probability vectors, flooring q at 1e-12 before the log.

    Raises:
        ContractViolation: If either input does not sum to 1 within 1e-6
    """
    for name, dist in (("p", p), ("q", q)):
        total = float(dist.detach().sum())
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise ContractViolation(f"KL input {name} sums to {total}, expected 1")
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(KL_FLOOR))).sum().clamp_min(0.0)


class ParamStore:
    """
    Named trainable tensors with a per-slot frozen flag.

    Slot order is insertion order, which for modules is the order of
    ``named_parameters()``; the flattened vector view follows it.
    """

    def __init__(self, slots: Mapping[str, torch.Tensor], frozen: Iterable[str] = ()):
        self._slots: "OrderedDict[str, torch.Tensor]" = OrderedDict(slots)
        self._frozen = set()
        for name in frozen:
            self.freeze(name)

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "", frozen: bool = False) -> "ParamStore":
        slots = OrderedDict((f"{prefix}{name}", param) for name, param in module.named_parameters())
        return cls(slots, frozen=slots.keys() if frozen else ())

    def merged(self, other: "ParamStore") -> "ParamStore":
        overlap = set(self._slots) & set(other._slots)
        if overlap:
            raise ValueError(f"duplicate slots {sorted(overlap)}")
        return ParamStore(
            OrderedDict(list(self._slots.items()) + list(other._slots.items())),
            frozen=self._frozen | other._frozen,
        )

    def freeze(self, name: str) -> None:
        self._slots[name].requires_grad_(False)
        self._frozen.add(name)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._slots[name]

    def __iter__(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self._slots.items())

    def __len__(self) -> int:
        return len(self._slots)

    def names(self) -> List[str]:
        return list(self._slots)

    def trainable(self) -> List[Tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self._slots.items() if n not in self._frozen]

    def frozen_slots(self) -> List[Tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self._slots.items() if n in self._frozen]

    def flatten(self, trainable_only: bool = True) -> torch.Tensor:
        items = self.trainable() if trainable_only else list(self._slots.items())
        if not items:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([t.detach().reshape(-1) for _, t in items])

    def frozen_digest(self) -> str:
        return tensor_digest(self.frozen_slots())


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_slot: Dict[str, float] = field(default_factory=dict)
    frozen: Tuple[str, ...] = ()


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(analytic.norm()), float(numeric.norm()))
    if scale < 1e-12:
        return 0.0
    return float((analytic - numeric).norm()) / scale


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    eps: float = 1e-6,
) -> GradCheckReport:
    """
    Compare autograd gradients of every unfrozen slot with central differences.

    Args:
        loss_fn: Recomputes the scalar loss from the current slot values
        store: Slots to check; frozen slots are skipped and listed in the report
        eps: Finite-difference step, within [1e-7, 1e-4]

    Returns:
        Report with the worst slot-wise relative error

    Raises:
        ValueError: On a non-finite loss or an out-of-range eps
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    trainable = store.trainable()
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite at the checked point")
    analytic = torch.autograd.grad(loss, [t for _, t in trainable], allow_unused=True)

    per_slot: Dict[str, float] = {}
    for (name, tensor), grad in zip(trainable, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad.detach()
        numeric = torch.zeros_like(tensor)
        flat = tensor.data.view(-1)
        numeric_flat = numeric.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            plus = float(loss_fn().detach())
            flat[i] = original - eps
            minus = float(loss_fn().detach())
            flat[i] = original
            numeric_flat[i] = (plus - minus) / (2 * eps)
        per_slot[name] = _relative_error(grad, numeric)

    worst = max(per_slot.values(), default=0.0)
    if math.isnan(worst):
        raise ValueError("gradient check produced NaN")
    logger.debug("grad_check worst relative error %.3e over %d slots", worst, len(per_slot))
    return GradCheckReport(
        max_relative_error=worst,
        per_slot=per_slot,
        frozen=tuple(name for name, _ in store.frozen_slots()),
    )
