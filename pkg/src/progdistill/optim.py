"""AdamW with linear warmup followed by linear decay."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import Tensor


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def lr_at(step: int, total: int, base_lr: float, warmup_ratio: float) -> float:
    """Learning rate for 0-based ``step`` out of ``total``."""
    warm = int(round(total * warmup_ratio))
    if warm > 0 and step < warm:
        return base_lr * (step + 1) / warm
    rest = max(1, total - warm)
    return base_lr * max(0.0, (total - step) / rest)


class AdamW:
    """Decoupled weight decay Adam over a name->Tensor parameter map."""

    def __init__(self, params: Mapping[str, Tensor], cfg: OptimConfig = OptimConfig()):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
