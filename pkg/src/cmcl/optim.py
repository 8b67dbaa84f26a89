"""Momentum SGD and AdamW with decoupled weight decay.

Both optimizers keep per-parameter buffers keyed by name, so stepping a subset
of the registered parameters (as the stage-wise trainer does) leaves the other
buffers untouched. Weight decay skips parameters whose name ends in ``.bias``.
Updates rebind ``node.value`` to a fresh array rather than writing in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Array, Node
from .errors import ConfigError, ShapeError

__all__ = ["OptimizerSpec", "MomentumSgd", "AdamW", "make_optimizer"]

KIND_SGD = "sgd"
KIND_ADAMW = "adamw"


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self, where: str = "optimizer") -> None:
        # lr == 0 is a legal no-op step; TrainConfig demands strictly positive rates.
        if self.kind not in (KIND_SGD, KIND_ADAMW):
            raise ConfigError(f"{where}.kind: unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ConfigError(f"{where}.lr: must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"{where}.momentum: must be in [0, 1), got {self.momentum}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{where}.{name}: must be in [0, 1), got {v}")
        if not self.eps > 0:
            raise ConfigError(f"{where}.eps: must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"{where}.weight_decay: must be >= 0, got {self.weight_decay}")


def _decays(name: str) -> bool:
    return not name.endswith(".bias")


class MomentumSgd:
    """v <- mu v + g; theta <- theta - lr v - lr wd theta (decay decoupled)."""

    def __init__(self, spec: OptimizerSpec):
        spec.validate()
        self.spec = spec
        self._velocity: dict[str, Array] = {}

    def step(self, params: Mapping[str, Node], grads: Mapping[str, Array]) -> None:
        lr, mu, wd = self.spec.lr, self.spec.momentum, self.spec.weight_decay
        for name, node in params.items():
            g = grads[name]
            if g.shape != node.value.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter {node.value.shape}")
            v = self._velocity.get(name)
            v = g.copy() if v is None else mu * v + g
            self._velocity[name] = v
            new = node.value - lr * v
            if wd and _decays(name):
                new = new - lr * wd * node.value
            node.value = new


class AdamW:
    """Bias-corrected Adam moments with decoupled weight decay."""

    def __init__(self, spec: OptimizerSpec):
        spec.validate()
        self.spec = spec
        self._state: dict[str, tuple[int, Array, Array]] = {}

    def step(self, params: Mapping[str, Node], grads: Mapping[str, Array]) -> None:
        s = self.spec
        for name, node in params.items():
            g = grads[name]
            if g.shape != node.value.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter {node.value.shape}")
            t, m, v = self._state.get(name, (0, np.zeros_like(node.value), np.zeros_like(node.value)))
            t += 1
            m = s.beta1 * m + (1.0 - s.beta1) * g
            v = s.beta2 * v + (1.0 - s.beta2) * (g * g)
            self._state[name] = (t, m, v)
            m_hat = m / (1.0 - s.beta1**t)
            v_hat = v / (1.0 - s.beta2**t)
            new = node.value - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
            if s.weight_decay and _decays(name):
                new = new - s.lr * s.weight_decay * node.value
            node.value = new


def make_optimizer(spec: OptimizerSpec):
    spec.validate()
    return MomentumSgd(spec) if spec.kind == KIND_SGD else AdamW(spec)
