"""Channel importance, retention masks and the stochastic training drop policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .density import RHO_MAX, RHO_MIN, drop_ratio

BETA = 0.6


@dataclass
class ChannelImportance:
    scores: np.ndarray
    provenance: str = "combined"
    beta: float = BETA

    @property
    def order(self) -> np.ndarray:
        """Channel indices from most to least important (lower index first on ties)."""
        return importance_order(self.scores)

    def __len__(self):
        return len(self.scores)


@dataclass
class DropMask:
    bits: np.ndarray
    rho: float
    k: int


def minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalize across channels; a constant vector maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def channel_variance(z: np.ndarray) -> np.ndarray:
    return np.asarray(z, dtype=np.float64).var(axis=1)


def channel_gradient(z: np.ndarray) -> np.ndarray:
    """Mean absolute difference between adjacent positions of each channel (0 if M == 1)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] < 2:
        return np.zeros(z.shape[0])
    return np.abs(np.diff(z, axis=1)).mean(axis=1)


def channel_importance(z, beta: float = BETA, provenance: str = "combined") -> ChannelImportance:
    """Per-channel score ``beta * norm(Var) + (1 - beta) * norm(Grad)`` of a ``C x M`` latent.

    Positions are taken in the order the encoder emitted them.
    """
    z = np.asarray(z, dtype=np.float64)
    if provenance == "variance":
        scores = minmax(channel_variance(z))
    elif provenance == "gradient":
        scores = minmax(channel_gradient(z))
    elif provenance == "combined":
        scores = beta * minmax(channel_variance(z)) + (1.0 - beta) * minmax(channel_gradient(z))
    else:
        raise ValueError(f"unknown importance provenance {provenance!r}")
    return ChannelImportance(scores, provenance, beta)


def aggregate_importance(latents, beta: float = BETA) -> ChannelImportance:
    """Dataset-level importance: variance over all positions, gradient averaged per cloud."""
    stacked = np.concatenate([np.asarray(z, dtype=np.float64) for z in latents], axis=1)
    grad = np.mean([channel_gradient(z) for z in latents], axis=0)
    scores = beta * minmax(channel_variance(stacked)) + (1.0 - beta) * minmax(grad)
    return ChannelImportance(scores, "combined", beta)


def importance_order(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def retained_count(rho: float, channels: int) -> int:
    """``ceil((1 - rho) * C)``, robust to float noise at integer boundaries."""
    x = (1.0 - rho) * channels
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 else int(math.ceil(x))


def build_mask(importance, rho: float, training: bool = False) -> DropMask:
    """Keep the top ``ceil((1 - rho) C)`` channels by score.

    During training at least one channel is always kept.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    scores = importance.scores if isinstance(importance, ChannelImportance) else np.asarray(importance)
    c = len(scores)
    k = retained_count(rho, c)
    if training:
        k = max(k, 1)
    bits = np.zeros(c, dtype=np.uint8)
    bits[importance_order(scores)[:k]] = 1
    return DropMask(bits, float(rho), k)


def mask_from_order(order, k: int) -> np.ndarray:
    bits = np.zeros(len(order), dtype=np.uint8)
    bits[np.asarray(order)[:k]] = 1
    return bits


def apply_tail_drop(z, z_xyz, rho: float, importance_z, importance_xyz, strategy: str = "combined"):
    """Zero the least important channels of both latents with a common drop ratio.

    With ``strategy="feature_only"`` the coordinate latent passes through untouched.
    """
    mz = build_mask(importance_z, rho).bits
    z_out = np.asarray(z) * mz[:, None]
    if strategy == "feature_only":
        return z_out, np.array(z_xyz, copy=True)
    if strategy != "combined":
        raise ValueError(f"unknown drop strategy {strategy!r}")
    mx = build_mask(importance_xyz, rho).bits
    return z_out, np.asarray(z_xyz) * mx[:, None]


def sample_training_drop(delta_scene: float, rng: np.random.Generator, channels: int = 32,
                         mix: float = 0.5, rho_min: float = RHO_MIN, rho_max: float = RHO_MAX) -> float:
    """Draw a training drop ratio.

    With probability ``mix`` the density-derived ratio is used; otherwise a
    uniform ratio on ``[0, (C - 1) / C]`` so every truncation depth is seen.
    """
    if not 0.0 <= delta_scene <= 1.0:
        raise ValueError(f"delta_scene must lie in [0, 1], got {delta_scene}")
    if rng.random() < mix:
        return drop_ratio(delta_scene, rho_min, rho_max)
    return float(rng.uniform(0.0, (channels - 1) / channels))
