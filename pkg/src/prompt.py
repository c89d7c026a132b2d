import torch

from src.denoise import NoiseAnnotation, Role


def build_prompt(role: Role, x: torch.Tensor, W_p: torch.Tensor) -> torch.Tensor:
    signal = W_p * x
    zeros = torch.zeros_like(signal)
    if role is Role.CORE:
        return torch.cat([signal, zeros], dim=-1)
    if role is Role.WEAK:
        return torch.cat([zeros, signal], dim=-1)
    if role is Role.UNWANTED:
        return torch.cat([signal, signal], dim=-1)
    raise ValueError(f"unknown role {role!r}")


def build_prompts(annotation: NoiseAnnotation, features: torch.Tensor, W_p: torch.Tensor) -> torch.Tensor:
    """Prompts for every step, shape (T, 2d')."""
    return torch.stack([build_prompt(sr.role, features[i], W_p) for i, sr in enumerate(annotation.roles)])
