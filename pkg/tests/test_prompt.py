import pytest
import torch

from src.denoise import NoiseAnnotation, Role, StepRole
from src.prompt import build_prompt, build_prompts

ONES = torch.ones(2, dtype=torch.float64)


@pytest.mark.parametrize(
    "role, expected",
    [(Role.CORE, [1, 1, 0, 0]), (Role.WEAK, [0, 0, 1, 1]), (Role.UNWANTED, [1, 1, 1, 1])],
)
def test_build_prompt_layout(role, expected):
    p = build_prompt(role, ONES, ONES)
    assert p.tolist() == expected


def test_build_prompt_scales_by_w_p():
    x = torch.tensor([2.0, -1.0], dtype=torch.float64)
    W_p = torch.tensor([0.5, 3.0], dtype=torch.float64)
    assert build_prompt(Role.WEAK, x, W_p).tolist() == [0.0, 0.0, 1.0, -3.0]


def test_build_prompt_rejects_unknown_role():
    with pytest.raises(ValueError):
        build_prompt("core", ONES, ONES)


def test_build_prompts_stacks_by_step():
    annotation = NoiseAnnotation(
        "a",
        (StepRole(1, Role.CORE, 0), StepRole(2, Role.UNWANTED), StepRole(3, Role.WEAK, 0, 1)),
    )
    features = torch.arange(6, dtype=torch.float64).reshape(3, 2)
    prompts = build_prompts(annotation, features, ONES)
    assert prompts.shape == (3, 4)
    assert prompts[0].tolist() == [0.0, 1.0, 0.0, 0.0]
    assert prompts[1].tolist() == [2.0, 3.0, 2.0, 3.0]
    assert prompts[2].tolist() == [0.0, 0.0, 4.0, 5.0]
