"""Adam with per-group learning rates and a reduce-on-plateau scheduler."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    name: str
    params: list[str]
    lr: float
    weight_decay: float = 0.0


class Adam:
    """Adam with bias correction and coupled (L2) weight decay."""

    def __init__(self, params: dict[str, Tensor], groups: list[ParamGroup],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        covered = [k for g in groups for k in g.params]
        if sorted(covered) != sorted(params):
            raise ValueError("parameter groups must cover every parameter exactly once")

    @property
    def lrs(self) -> dict[str, float]:
        return {g.name: g.lr for g in self.groups}

    def step(self):
        for g in self.groups:
            for k in g.params:
                grad = self.params[k].grad
                if grad is not None and not np.all(np.isfinite(grad)):
                    raise FloatingPointError(f"non-finite gradient for {k}; optimizer step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for g in self.groups:
            for k in g.params:
                p = self.params[k]
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                if g.weight_decay:
                    grad = grad + g.weight_decay * p.data
                m, v = self.m[k], self.v[k]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - g.lr * update).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out


@dataclass
class PlateauScheduler:
    """Multiply every group LR by ``factor`` once the metric stops improving.

    The counter counts non-improving observations; a drop happens when it
    exceeds ``patience``, i.e. on the (patience+1)-th non-improving event.
    """

    optimizer: Adam
    patience: int
    factor: float = 0.1
    min_delta: float = 1e-4
    best_metric: float = float("-inf")
    events_since_best: int = 0
    num_drops: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    def observe(self, val_metric: float) -> bool:
        """Record one validation result. Returns True when the LRs were dropped."""
        if val_metric > self.best_metric + self.min_delta:
            self.best_metric = val_metric
            self.events_since_best = 0
        else:
            self.events_since_best += 1
        dropped = False
        if self.events_since_best > self.patience:
            for g in self.optimizer.groups:
                g.lr *= self.factor
            self.events_since_best = 0
            self.num_drops += 1
            dropped = True
        self.history.append(dict(self.optimizer.lrs))
        return dropped
