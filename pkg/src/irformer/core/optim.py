"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from irformer.core.tensor import Parameter
from irformer.errors import ConfigError, ContractError


@dataclass
class SgdState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")


class SGD:
    """
    Heavy-ball SGD::

        v <- momentum * v + (grad + weight_decay * w)
        w <- w - lr * v

    Gradients are left in place; call :meth:`zero_grad` before the next
    backward pass.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 0.01,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ContractError("parameter names must be unique within an optimizer")
        self.state = SgdState(lr=lr, momentum=momentum, weight_decay=weight_decay)
        for p in self.params:
            self.state.velocity[p.name] = np.zeros_like(p.data)

    def step(self) -> None:
        s = self.state
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient")
            v = s.velocity[p.name]
            v *= s.momentum
            v += p.grad
            if s.weight_decay:
                v += s.weight_decay * p.data
            p.data -= s.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
