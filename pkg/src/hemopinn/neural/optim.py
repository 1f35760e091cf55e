"""ADAM with per-slice learning rates and a multiplicative step decay."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .mlp import DTYPE, ParamVector

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int
    lr: torch.Tensor  # per-entry base learning rate
    decay_every: int = 0  # steps between decays; 0 disables
    decay_factor: float = 0.5

    def current_scale(self) -> float:
        if self.decay_every <= 0:
            return 1.0
        return self.decay_factor ** (self.step // self.decay_every)


def adam_init(params: ParamVector, lr: dict[str, float], decay_every: int = 0, decay_factor: float = 0.5) -> AdamState:
    """Zero moments; every slice must have a learning rate."""
    rates = torch.zeros(len(params), dtype=DTYPE)
    for name, (a, b) in params.slices.items():
        if name not in lr:
            raise KeyError(f"no learning rate for slice {name!r}")
        rates[a:b] = float(lr[name])
    z = torch.zeros(len(params), dtype=DTYPE)
    return AdamState(z, z.clone(), 0, rates, int(decay_every), float(decay_factor))


def adam_step(state: AdamState, params: torch.Tensor, grad: torch.Tensor) -> tuple[AdamState, torch.Tensor]:
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("params, grad and moments must share one shape")
    scale = state.current_scale()
    t = state.step + 1
    m = BETA1 * state.m + (1 - BETA1) * grad
    v = BETA2 * state.v + (1 - BETA2) * grad * grad
    mhat = m / (1 - BETA1**t)
    vhat = v / (1 - BETA2**t)
    new = params - scale * state.lr * mhat / (torch.sqrt(vhat) + EPS)
    return replace(state, m=m, v=v, step=t), new
