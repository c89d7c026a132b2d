"""Low-rank knowledge-state correction and the noise-feature losses."""

import logging
import math
from typing import List, Optional

import torch
from torch import nn

from src.denoise import NoiseAnnotation, Role
from src.numerics import DTYPE, kl_divergence, softmax

logger = logging.getLogger(__name__)


class AdaptorParams(nn.Module):
    """
    Prompt weights W_p (d'), and the rank-b pair W_A (b x 2d'), W_B (b x d_h).

    W_A takes the usual low-rank uniform init and W_B starts at zero, so a
    fresh adaptor leaves every state unchanged while W_B still gets gradient.
    """

    def __init__(self, dim: int, d_h: int, rank: Optional[int] = None):
        super().__init__()
        rank = rank or max(1, dim // 2)
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.dim = dim
        self.d_h = d_h
        self.rank = rank
        self.W_p = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.W_A = nn.Parameter(torch.empty(rank, 2 * dim, dtype=DTYPE))
        self.W_B = nn.Parameter(torch.zeros(rank, d_h, dtype=DTYPE))
        nn.init.kaiming_uniform_(self.W_A, a=math.sqrt(5))


def correct_state(h: torch.Tensor, p: torch.Tensor, params: AdaptorParams) -> torch.Tensor:
    """h' = h + W_B^T (W_A p); works on one step or a (T, .) stack."""
    return h + (p @ params.W_A.T) @ params.W_B


def reference_steps(annotation: NoiseAnnotation) -> List[Optional[int]]:
    """
    Step whose corrected state each step is pulled towards, or None.

    Weak -> its cluster's core; Unwanted -> the latest earlier Core/Weak step;
    Core, and Unwanted with no earlier related step, have no reference.
    """
    refs: List[Optional[int]] = []
    last_related: Optional[int] = None
    for sr in annotation.roles:
        if sr.role is Role.WEAK:
            refs.append(sr.core_step)
        elif sr.role is Role.UNWANTED:
            refs.append(last_related)
        else:
            refs.append(None)
        if sr.role is not Role.UNWANTED:
            last_related = sr.step
    return refs


def adaptor_loss(role: Role, h_t: torch.Tensor, h_ref: Optional[torch.Tensor]) -> torch.Tensor:
    if role is Role.CORE or h_ref is None:
        return torch.zeros((), dtype=h_t.dtype)
    return kl_divergence(softmax(h_t), softmax(h_ref))


def sequence_adaptor_loss(
    annotation: NoiseAnnotation,
    corrected: torch.Tensor,
    weak_loss: bool = True,
    unwanted_loss: bool = True,
) -> torch.Tensor:
    """Sum of the per-step noise-feature losses over steps 1..T."""
    total = torch.zeros((), dtype=corrected.dtype)
    for sr, ref in zip(annotation.roles, reference_steps(annotation)):
        if ref is None:
            continue
        if sr.role is Role.WEAK and not weak_loss:
            continue
        if sr.role is Role.UNWANTED and not unwanted_loss:
            continue
        total = total + adaptor_loss(sr.role, corrected[sr.step - 1], corrected[ref - 1])
    return total
