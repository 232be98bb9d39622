"""Density statistics, composite density score, drop ratio and EMA bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AssignmentMap

RHO_MIN = 0.15
RHO_MAX = 0.40
EMA_GAMMA = 0.1
EMA_EPS = 1e-6


@dataclass
class DensityStats:
    d_num: np.ndarray
    d_dist: np.ndarray


@dataclass
class NormalizationState:
    """Running upper bounds for ``d_num`` (``d_max``) and ``d_dist`` (``m_max``)."""

    d_max: float = 0.0
    m_max: float = 0.0
    gamma: float = EMA_GAMMA
    t: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    @property
    def initialized(self) -> bool:
        return self.t > 0


def compute_density_stats(assignment: AssignmentMap, original, downsampled) -> DensityStats:
    """Per-sample point count and mean distance of the originals that collapse onto it."""
    orig = getattr(original, "coords", original)
    ds = getattr(downsampled, "coords", downsampled)
    m = len(ds)
    nearest = assignment.nearest
    dist = np.linalg.norm(orig - ds[nearest], axis=1)
    d_num = np.bincount(nearest, minlength=m).astype(np.float64)
    total = np.bincount(nearest, weights=dist, minlength=m)
    d_dist = np.divide(total, d_num, out=np.zeros(m), where=d_num > 0)
    return DensityStats(d_num, d_dist)


def composite_score(stats: DensityStats, norm: NormalizationState) -> np.ndarray:
    """delta = (clip(d_num/d_max) + 1 - clip(d_dist/m_max)) / 2, in [0, 1]."""
    if not norm.initialized:
        raise ValueError("normalization state has not been initialized by ema_update")
    a = np.clip(np.asarray(stats.d_num, dtype=np.float64) / norm.d_max, 0.0, 1.0)
    b = np.clip(np.asarray(stats.d_dist, dtype=np.float64) / norm.m_max, 0.0, 1.0)
    return np.clip(0.5 * (a + (1.0 - b)), 0.0, 1.0)


def drop_ratio(delta, rho_min: float = RHO_MIN, rho_max: float = RHO_MAX):
    """Linear map from density score to drop ratio; denser means fewer channels dropped."""
    if not 0.0 <= rho_min <= rho_max <= 1.0:
        raise ValueError(f"need 0 <= rho_min <= rho_max <= 1, got {rho_min}, {rho_max}")
    rho = rho_max - (rho_max - rho_min) * np.asarray(delta, dtype=np.float64)
    rho = np.clip(rho, rho_min, rho_max)
    return float(rho) if rho.ndim == 0 else rho


def percentile_95(values) -> float:
    """Nearest-rank 95th percentile: element ``ceil(0.95 n)`` (1-based) of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty batch")
    # 0.95 * n in exact integer arithmetic
    rank = -(-95 * v.size // 100)
    return float(v[max(rank, 1) - 1])


def ema_update(norm: NormalizationState, batch_d_num, batch_d_dist) -> NormalizationState:
    """One EMA step of both bounds toward the batch 95th percentile.

    The first call initializes each bound to ``max(P95, 1e-6)``.
    """
    p_num = percentile_95(batch_d_num)
    p_dist = percentile_95(batch_d_dist)
    if not norm.initialized:
        return NormalizationState(max(p_num, EMA_EPS), max(p_dist, EMA_EPS), norm.gamma, 1)
    g = norm.gamma
    d_max = max((1.0 - g) * norm.d_max + g * p_num, EMA_EPS)
    m_max = max((1.0 - g) * norm.m_max + g * p_dist, EMA_EPS)
    return NormalizationState(d_max, m_max, g, norm.t + 1)


def scene_drop_ratio(delta, rho_min: float = RHO_MIN, rho_max: float = RHO_MAX) -> float:
    """Scene-level drop ratio: mean of the per-point ratios."""
    return float(np.mean(drop_ratio(np.atleast_1d(delta), rho_min, rho_max)))

