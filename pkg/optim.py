'''Adam with named parameter groups and explicit, transferable moments.

The first and second moments live in AdamState objects owned by the
optimizer, so face-indexed moments can be carried across a remeshing pass
together with the parameters they belong to.'''

from dataclasses import dataclass

import torch

from fields import NonFiniteError


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m1: torch.Tensor
    m2: torch.Tensor
    step: int = 0

    @staticmethod
    def zeros_like(param: torch.Tensor) -> 'AdamState':
        return AdamState(torch.zeros_like(param.detach()), torch.zeros_like(param.detach()))


def adam_step(param: torch.Tensor, grad: torch.Tensor, state: AdamState, hyper: AdamHyper,
              name: str = 'params'):
    'One bias-corrected Adam update. Returns (new parameter values, new state).'
    if param.shape != grad.shape or state.m1.shape != param.shape:
        raise ValueError(f'{name}: parameter {tuple(param.shape)}, gradient {tuple(grad.shape)} '
                         f'and moments {tuple(state.m1.shape)} must have the same shape')
    if not torch.isfinite(grad).all():
        raise NonFiniteError(f'non-finite gradient in parameter group {name!r}')

    step = state.step + 1
    m1 = hyper.beta1 * state.m1 + (1 - hyper.beta1) * grad
    m2 = hyper.beta2 * state.m2 + (1 - hyper.beta2) * grad * grad
    m1_hat = m1 / (1 - hyper.beta1 ** step)
    m2_hat = m2 / (1 - hyper.beta2 ** step)
    update = hyper.lr * m1_hat / (m2_hat.sqrt() + hyper.eps)
    return param.detach() - update, AdamState(m1, m2, step)


class GroupedAdam:
    'Applies adam_step to every parameter of the enabled groups that received a gradient.'

    def __init__(self):
        self.groups = {}
        self.hypers = {}
        self.states = {}
        self.enabled = {}

    def add_group(self, name: str, params, hyper: AdamHyper, enabled: bool = True):
        self.groups[name] = list(params)
        self.hypers[name] = hyper
        self.states[name] = [AdamState.zeros_like(p) for p in self.groups[name]]
        self.enabled[name] = enabled

    def enable(self, name: str, enabled: bool = True):
        self.enabled[name] = enabled

    def rebind(self, name: str, params, states):
        'Swaps in new parameters and their moments, e.g. after a topology change.'
        params, states = list(params), list(states)
        if len(params) != len(states):
            raise ValueError('every rebound parameter needs a state')
        self.groups[name] = params
        self.states[name] = states

    def parameters(self, name: str = None):
        names = [name] if name else [n for n in self.groups if self.enabled[n]]
        return [p for n in names for p in self.groups[n]]

    def zero_grad(self):
        for params in self.groups.values():
            for p in params:
                p.grad = None

    def step(self):
        for name, params in self.groups.items():
            if not self.enabled[name]:
                continue
            for i, p in enumerate(params):
                if p.grad is None:
                    continue
                values, self.states[name][i] = adam_step(p, p.grad, self.states[name][i],
                                                         self.hypers[name], name)
                with torch.no_grad():
                    p.copy_(values)

    def state_dict(self) -> dict:
        return {name: [dict(m1=s.m1.clone(), m2=s.m2.clone(), step=s.step) for s in states]
                for name, states in self.states.items()}
