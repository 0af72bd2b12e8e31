import pytest
import torch

from fields import NonFiniteError
from optim import AdamHyper, AdamState, GroupedAdam, adam_step


def quadratic(p):
    return ((p - torch.arange(p.numel(), dtype=p.dtype).reshape(p.shape)) ** 2).sum()


def test_first_step_moves_by_the_learning_rate():
    p = torch.zeros(3, dtype=torch.float64)
    grad = torch.tensor([2.0, -0.5, 0.0], dtype=torch.float64)
    values, state = adam_step(p, grad, AdamState.zeros_like(p), AdamHyper(lr=0.1))
    assert torch.allclose(values, torch.tensor([-0.1, 0.1, 0.0], dtype=torch.float64), atol=1e-6)
    assert state.step == 1


def test_matches_torch_adam():
    reference = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    ours = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    torch_optimizer = torch.optim.Adam([reference], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    optimizer = GroupedAdam()
    optimizer.add_group('p', [ours], AdamHyper(lr=0.05))

    for _ in range(20):
        torch_optimizer.zero_grad()
        quadratic(reference).backward()
        torch_optimizer.step()
        optimizer.zero_grad()
        quadratic(ours).backward()
        optimizer.step()

    assert torch.allclose(ours, reference, rtol=1e-10, atol=1e-12)
    assert optimizer.states['p'][0].step == 20


def test_disabled_groups_are_frozen():
    a = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    optimizer = GroupedAdam()
    optimizer.add_group('a', [a], AdamHyper())
    optimizer.add_group('b', [b], AdamHyper(), enabled=False)
    (quadratic(a) + quadratic(b) + a.sum() + b.sum()).backward()
    optimizer.step()
    assert a.abs().sum() > 0
    assert torch.count_nonzero(b) == 0
    assert optimizer.parameters() == [a]
    optimizer.enable('b')
    assert optimizer.parameters() == [a, b]


def test_non_finite_gradient_names_the_group():
    p = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    optimizer = GroupedAdam()
    optimizer.add_group('static', [p], AdamHyper())
    p.grad = torch.tensor([float('nan'), 0.0], dtype=torch.float64)
    with pytest.raises(NonFiniteError, match='static'):
        optimizer.step()


def test_rebind_swaps_parameters_and_moments():
    optimizer = GroupedAdam()
    optimizer.add_group('static', [torch.zeros(2, requires_grad=True)], AdamHyper())
    new = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    state = AdamState(torch.ones(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64), step=7)
    optimizer.rebind('static', [new], [state])
    assert optimizer.parameters('static') == [new]
    assert optimizer.state_dict()['static'][0]['step'] == 7
    with pytest.raises(ValueError):
        optimizer.rebind('static', [new], [])


def test_adam_step_checks_shapes():
    p = torch.zeros(3, dtype=torch.float64)
    with pytest.raises(ValueError):
        adam_step(p, torch.zeros(4, dtype=torch.float64), AdamState.zeros_like(p), AdamHyper())
