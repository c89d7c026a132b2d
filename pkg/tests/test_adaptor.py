import math

import pytest
import torch

from src.adaptor import AdaptorParams, adaptor_loss, correct_state, reference_steps, sequence_adaptor_loss
from src.denoise import NoiseAnnotation, Role, StepRole
from src.numerics import ParamStore, grad_check


def _annotation():
    return NoiseAnnotation(
        "a",
        (
            StepRole(1, Role.UNWANTED),
            StepRole(2, Role.CORE, 0),
            StepRole(3, Role.WEAK, 0, 2),
            StepRole(4, Role.UNWANTED),
            StepRole(5, Role.CORE, 1),
        ),
    )


def test_defaults_leave_states_unchanged():
    params = AdaptorParams(dim=4, d_h=3)
    assert params.rank == 2
    h = torch.randn(5, 3, dtype=torch.float64)
    p = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(correct_state(h, p, params), h)


def test_zero_prompt_leaves_state_unchanged():
    params = AdaptorParams(dim=2, d_h=2, rank=1)
    with torch.no_grad():
        params.W_B.fill_(1.0)
    h = torch.tensor([0.3, -0.2], dtype=torch.float64)
    assert torch.equal(correct_state(h, torch.zeros(4, dtype=torch.float64), params), h)


def test_correct_state_hand_example():
    params = AdaptorParams(dim=2, d_h=2, rank=1)
    with torch.no_grad():
        params.W_A.copy_(torch.tensor([[1.0, 0.0, 0.0, 0.0]]))
        params.W_B.copy_(torch.tensor([[1.0, 1.0]]))
    p = torch.tensor([2.0, 5.0, -1.0, 7.0], dtype=torch.float64)
    out = correct_state(torch.zeros(2, dtype=torch.float64), p, params)
    assert out.tolist() == [2.0, 2.0]


def test_correction_is_linear_in_prompt():
    torch.manual_seed(0)
    params = AdaptorParams(dim=3, d_h=4)
    with torch.no_grad():
        params.W_B.normal_()
    h = torch.randn(4, dtype=torch.float64)
    p1, p2 = torch.randn(6, dtype=torch.float64), torch.randn(6, dtype=torch.float64)
    joint = correct_state(h, p1 + p2, params) - h
    split = (correct_state(h, p1, params) - h) + (correct_state(h, p2, params) - h)
    assert torch.allclose(joint, split, atol=1e-12)


def test_adaptor_loss_examples():
    zero = torch.zeros(2, dtype=torch.float64)
    ref = torch.tensor([math.log(9.0), 0.0], dtype=torch.float64)
    assert float(adaptor_loss(Role.WEAK, zero, ref)) == pytest.approx(0.5 * math.log(25 / 9))
    assert float(adaptor_loss(Role.UNWANTED, ref, ref)) == pytest.approx(0.0, abs=1e-15)
    assert float(adaptor_loss(Role.CORE, zero, ref)) == 0.0
    assert float(adaptor_loss(Role.UNWANTED, zero, None)) == 0.0


def test_reference_steps():
    assert reference_steps(_annotation()) == [None, None, 2, 3, None]


def test_sequence_loss_switches():
    torch.manual_seed(1)
    corrected = torch.randn(5, 3, dtype=torch.float64)
    annotation = _annotation()
    weak = adaptor_loss(Role.WEAK, corrected[2], corrected[1])
    unwanted = adaptor_loss(Role.UNWANTED, corrected[3], corrected[2])
    assert torch.allclose(sequence_adaptor_loss(annotation, corrected), weak + unwanted)
    assert torch.allclose(sequence_adaptor_loss(annotation, corrected, weak_loss=False), unwanted)
    assert torch.allclose(sequence_adaptor_loss(annotation, corrected, unwanted_loss=False), weak)
    assert float(sequence_adaptor_loss(annotation, corrected, weak_loss=False, unwanted_loss=False)) == 0.0


def test_adaptor_gradients_pass_grad_check():
    torch.manual_seed(2)
    params = AdaptorParams(dim=2, d_h=3, rank=2)
    with torch.no_grad():
        params.W_B.normal_()
    h = torch.randn(5, 3, dtype=torch.float64)
    prompts = torch.randn(5, 4, dtype=torch.float64)
    annotation = _annotation()

    def loss():
        return sequence_adaptor_loss(annotation, correct_state(h, prompts, params))

    report = grad_check(loss, ParamStore.from_module(params))
    assert report.max_relative_error < 1e-4
