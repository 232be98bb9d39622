"""Exact nearest neighbours, farthest-point sampling, assignment and normals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .pcio import PointCloud

# extra candidates fetched from the tree so ties at the k-th distance can be resolved
_TIE_SLACK = 8


@dataclass
class NeighborIndex:
    """``indices[q]`` / ``distances[q]``: the k nearest reference points of query q, ascending."""

    indices: np.ndarray
    distances: np.ndarray
    self_query: bool = False


@dataclass
class AssignmentMap:
    """Nearest downsampled point for every original point, plus the inverse buckets."""

    nearest: np.ndarray
    buckets: list

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(b) for b in self.buckets], dtype=np.int64)


def _as_coords(x) -> np.ndarray:
    return x.coords if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _brute_rows(ref: np.ndarray, q: np.ndarray, k: int):
    d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


def knn(reference, queries, k: int) -> NeighborIndex:
    """Exact k nearest neighbours; equal distances resolve to the lower reference index."""
    ref = _as_coords(reference)
    q = _as_coords(queries)
    n = len(ref)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}] (reference size)")
    kk = min(n, k + _TIE_SLACK)
    tree = cKDTree(ref)
    _, cand = tree.query(q, k=kk)
    cand = np.asarray(cand).reshape(len(q), kk)
    d2 = ((q[:, None, :] - ref[cand]) ** 2).sum(-1)
    # lexsort on (index, distance) gives the tie rule within the candidate set
    order = np.lexsort((cand, d2), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    idx, dist2 = cand[:, :k].copy(), d2[:, :k].copy()
    if kk < n:
        # the tie group at the k-th distance may extend past the candidate window
        kth = d2[:, k - 1]
        last = d2[:, -1]
        unsafe = np.nonzero(last - kth <= 1e-12 * np.maximum(1.0, kth))[0]
        if len(unsafe):
            bi, bd = _brute_rows(ref, q[unsafe], k)
            idx[unsafe] = bi
            dist2[unsafe] = bd
    return NeighborIndex(idx, np.sqrt(dist2), self_query=reference is queries)


def _target_count(n: int, factor) -> int:
    if isinstance(factor, (int, np.integer)) and not isinstance(factor, bool) and factor >= 1:
        return int(factor)
    f = Fraction(factor).limit_denominator(1000)
    return int(math.ceil(f * n))


def farthest_point_sampling(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min sampling seeded at the point nearest the centroid."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    m = min(m, n)
    c = coords.mean(axis=0)
    seed = int(np.argmin(((coords - c) ** 2).sum(1)))
    out = np.empty(m, dtype=np.int64)
    out[0] = seed
    mind = ((coords - coords[seed]) ** 2).sum(1)
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        np.minimum(mind, ((coords - coords[nxt]) ** 2).sum(1), out=mind)
    return out


def downsample(pc, factor: Union[float, Fraction, int]):
    """FPS to ``ceil(factor * N)`` points (or exactly ``factor`` points if an int >= 1).

    Returns ``(indices, PointCloud)``; indices are in emission order.
    """
    coords = _as_coords(pc)
    m = _target_count(len(coords), factor)
    if m < 1:
        raise ValueError("downsampling would produce zero points")
    idx = farthest_point_sampling(coords, m)
    return idx, PointCloud(coords[idx])


def nearest_assignment(original, downsampled) -> AssignmentMap:
    """Map each original point to its nearest downsampled point (lower index on ties)."""
    orig = _as_coords(original)
    ds = _as_coords(downsampled)
    nearest = knn(ds, orig, 1).indices[:, 0]
    order = np.argsort(nearest, kind="stable")
    counts = np.bincount(nearest, minlength=len(ds))
    buckets = np.split(order, np.cumsum(counts)[:-1])
    amap = AssignmentMap(nearest, buckets)
    assert counts.sum() == len(orig)
    return amap


def estimate_normals(pc: PointCloud, k: int = 16) -> PointCloud:
    """PCA normals from k-NN covariance, oriented away from the local centroid.

    Points whose neighbourhood has rank < 2 get ``+z`` and are flagged in
    ``PointCloud.degenerate``.
    """
    coords = pc.coords
    n = len(coords)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    nb = knn(coords, coords, k).indices
    local = coords[nb]
    centroid = local.mean(axis=1)
    diff = local - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", diff, diff) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = (w[:, 1] <= 1e-10 * scale) | (w[:, 2] <= 1e-24)
    away = ((coords - centroid) * normals).sum(1)
    normals[away < 0] *= -1
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = PointCloud(coords, normals, pc.source_id)
    out.degenerate = degenerate
    return out
