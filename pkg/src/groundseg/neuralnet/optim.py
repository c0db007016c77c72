"""Adam with decoupled weight decay and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class OptimState:
    lr: float = 0.003
    weight_decay: float = 0.0005
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


@torch.no_grad()
def adam_step(params, grads, state: OptimState) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` before the moment
    update is applied.
    """
    params, grads = list(params), list(grads)
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = BETAS
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if state.weight_decay:
            p.mul_(1 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(EPS)
        p.addcdiv_(m, denom, value=-state.lr / c1)


class Adam:
    def __init__(self, params, lr: float = 0.003, weight_decay: float = 0.0005):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimState(lr=lr, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    a relative loss improvement larger than ``threshold``."""

    def __init__(self, optimizer: Adam, factor: float = 0.35, patience: int = 3,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = float("inf")
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, loss: float) -> bool:
        if loss < self.best * (1 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            st = self.optimizer.state
            st.lr = max(st.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
            self.reductions += 1
            return True
        return False
