"""Parameters, modules and the dense layers used by the codec."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(np.ascontiguousarray(data), requires_grad=True, name=name)


class Module:
    """Container that collects :class:`Parameter` attributes and child modules by name."""

    def parameters(self, prefix: str = "") -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        out[f"{prefix}{key}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.parameters(f"{prefix}{key}.{i}."))
        for name, p in out.items():
            p.name = name
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=ag.DTYPE)
            if arr.shape != p.shape:
                raise ag.DimensionError(f"parameter {k}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        bound = gain * np.sqrt(2.0 / n_in)
        self.weight = Parameter(rng.normal(0.0, bound, size=(n_in, n_out)), "weight")
        self.bias = Parameter(np.zeros(n_out), "bias")

    def __call__(self, x) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Linear layers with leaky-ReLU between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, slope: float = 0.2, out_gain: float = 1.0):
        self.layers = [
            Linear(a, b, rng, gain=out_gain if i == len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.slope = slope

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.leaky_relu(x, self.slope)
        return x
