"""Adam and the polynomial learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-6
BASE_LR = 1e-4
LR_POWER = 0.9


class NumericError(FloatingPointError):
    pass


@dataclass
class LrSchedule:
    base: float = BASE_LR
    power: float = LR_POWER
    total_steps: int = 1

    def lr_at(self, t: int) -> float:
        """base * (1 - t / total_steps) ** power for 0 <= t <= total_steps."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        return self.base * (1.0 - t / self.total_steps) ** self.power


class Adam:
    """Bias-corrected Adam over a name -> tensor mapping.

    The moment buffers are keyed by parameter name so they can be saved into
    and restored from a checkpoint.
    """

    def __init__(self, named_params, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError(f"negative learning rate {lr}")
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"adam.t": np.array(float(self.t))}
        for name in self.params:
            state[f"adam.m.{name}"] = self.m[name]
            state[f"adam.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"])
        for name, p in self.params.items():
            self.m[name] = np.asarray(state[f"adam.m.{name}"], dtype=p.dtype).copy()
            self.v[name] = np.asarray(state[f"adam.v.{name}"], dtype=p.dtype).copy()
