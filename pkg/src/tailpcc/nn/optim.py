"""Adam and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def lr_schedule(epoch: int, base_lr: float = 1e-3, step: int = 15, factor: float = 0.5) -> float:
    """``base_lr * 0.5 ** (epoch // 15)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * factor ** (epoch // step)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a name -> Parameter mapping."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, state: AdamState | None = None):
        self.params = params
        self.state = state or AdamState(beta1, beta2, eps, lr)
        for name, p in params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))
            if self.state.m[name].shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        st = self.state
        lr = st.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
