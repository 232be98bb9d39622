"""Factorized entropy bottleneck: quantization, learned per-channel likelihoods and BPP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import Module, Parameter

LIKELIHOOD_FLOOR = 1e-9


class ModelIntegrityError(ValueError):
    pass


@dataclass
class QuantizedLatent:
    """Integer symbol grids, channel-major (``C x M`` and ``C_xyz x M``)."""

    z: np.ndarray
    z_xyz: np.ndarray

    def bounds(self):
        return _bounds(self.z), _bounds(self.z_xyz)


def _bounds(a):
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], 2), dtype=np.int64)
    return np.stack([a.min(axis=1), a.max(axis=1)], axis=1).astype(np.int64)


def quantize(z, mode: str = "infer", rng: np.random.Generator | None = None):
    """``infer``: round half to even. ``train``: additive uniform noise on (-1/2, 1/2)."""
    if mode == "infer":
        data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
        return np.round(data).astype(np.int64)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs an rng")
        noise = rng.uniform(-0.5, 0.5, size=np.shape(z.data if isinstance(z, Tensor) else z))
        return z + noise if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64) + noise
    raise ValueError(f"unknown quantization mode {mode!r}")


class FactorizedEntropyModel(Module):
    """Per-channel monotone CDF network (1 -> 3 -> 3 -> 1, softplus-positive weights).

    ``cdf(x) = sigmoid(f(x))`` with ``f`` strictly increasing; the probability
    of integer ``n`` is ``cdf(n + 1/2) - cdf(n - 1/2)``.
    """

    filters = (3, 3)

    def __init__(self, channels: int, init_scale: float = 10.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(_P(np.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(_P(rng.uniform(-0.5, 0.5, size=(channels, dims[i + 1], 1))))
            if i < len(dims) - 2:
                self.factors.append(_P(np.zeros((channels, dims[i + 1], 1))))

    def logits_cumulative(self, x) -> Tensor:
        """``x`` has shape ``(C, 1, L)``; returns pre-sigmoid CDF values of the same shape."""
        h = x
        for i, (mat, bias) in enumerate(zip(self.matrices, self.biases)):
            h = ag.matmul(ag.softplus(mat), h) + bias
            if i < len(self.factors):
                h = h + ag.tanh(self.factors[i]) * ag.tanh(h)
        return h

    def cdf(self, x) -> Tensor:
        return ag.sigmoid(self.logits_cumulative(x))

    def likelihood(self, x) -> Tensor:
        """Probability mass of ``x`` (``M x C``, real or integer valued) per element."""
        x = ag.as_tensor(x)
        xt = ag.transpose(x).reshape(self.channels, 1, x.shape[0])
        lower = self.logits_cumulative(xt - 0.5)
        upper = self.logits_cumulative(xt + 0.5)
        # evaluate in the tail where the sigmoid is not saturated
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0)
        lik = ag.abs(ag.sigmoid(upper * sign) - ag.sigmoid(lower * sign))
        lik = ag.maximum(lik, LIKELIHOOD_FLOOR)
        return ag.transpose(lik.reshape(self.channels, x.shape[0]))

    def bits(self, x, channel_mask=None) -> Tensor:
        """Total ``-log2`` likelihood over the retained channels."""
        nll = ag.log(self.likelihood(x)) * (-1.0 / np.log(2.0))
        if channel_mask is not None:
            nll = nll * np.asarray(channel_mask, dtype=np.float64)[None, :]
        return ag.reduce_sum(nll)

    def pmf_tables(self, lo: int, hi: int) -> np.ndarray:
        """``C x (hi - lo + 1)`` probabilities of the integers ``lo .. hi`` (no gradient)."""
        with ag.no_grad():
            x = np.broadcast_to(np.arange(lo, hi + 1, dtype=np.float64), (self.channels, 1, hi - lo + 1))
            lower = self.logits_cumulative(x - 0.5).data[:, 0]
            upper = self.logits_cumulative(x + 0.5).data[:, 0]
        sign = np.where(lower + upper > 0, -1.0, 1.0)
        return np.abs(ag._sigmoid(sign * upper) - ag._sigmoid(sign * lower))


def _P(arr):
    return Parameter(arr, "")


def symbol_bits(model: FactorizedEntropyModel, symbols: np.ndarray) -> np.ndarray:
    """``-log2 p`` of each integer symbol in an ``M x C`` grid."""
    with ag.no_grad():
        lik = model.likelihood(np.asarray(symbols, dtype=np.float64)).data
    if np.any(lik <= 0) or not np.all(np.isfinite(lik)):
        raise ModelIntegrityError("entropy model produced a non-positive likelihood")
    return -np.log2(lik)


def estimate_bpp(quantized: QuantizedLatent, model_z: FactorizedEntropyModel,
                 model_xyz: FactorizedEntropyModel, retained_z, retained_xyz, n_points: int,
                 density_bits: float = 0.0) -> float:
    """Bits per input point of the retained channels (plus side-channel ``density_bits``)."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    total = float(density_bits)
    rz = sorted(set(int(c) for c in retained_z))
    rx = sorted(set(int(c) for c in retained_xyz))
    if rz:
        total += symbol_bits(model_z, quantized.z.T)[:, rz].sum()
    if rx:
        total += symbol_bits(model_xyz, quantized.z_xyz.T)[:, rx].sum()
    return float(total / n_points)
