"""AdamW with named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class AdamW:
    """Decoupled weight decay Adam.

    ``lr`` maps a parameter name to its current learning rate; the caller
    updates it per step (schedules live in the training loop).
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, store: ParamStore, lr_of) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in store.items():
            if p.grad is None:
                continue
            lr = lr_of(name)
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"__adam__/step": np.array([float(self.step_count)])}
        for k in sorted(self.m):
            out[f"__adam_m__/{k}"] = self.m[k]
            out[f"__adam_v__/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.m.clear()
        self.v.clear()
        for k, val in state.items():
            if k == "__adam__/step":
                self.step_count = int(val[0])
            elif k.startswith("__adam_m__/"):
                self.m[k[len("__adam_m__/"):]] = np.array(val, dtype=np.float64)
            elif k.startswith("__adam_v__/"):
                self.v[k[len("__adam_v__/"):]] = np.array(val, dtype=np.float64)
