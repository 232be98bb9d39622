"""Chamfer distance, PSNR-D1/D2 and Bjontegaard delta rate."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import estimate_normals, knn
from .pcio import PointCloud


class MetricUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and math.isfinite(self.quality)) or self.bpp < 0:
            raise ValueError(f"invalid RD point {self}")


def _coords(x) -> np.ndarray:
    c = x.coords if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(c) == 0:
        raise ValueError("metric needs non-empty point clouds")
    return c


def directional_sq_errors(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Squared distance from each ``src`` point to its nearest ``dst`` point, and that index."""
    nb = knn(dst, src, 1)
    return nb.distances[:, 0] ** 2, nb.indices[:, 0]


def chamfer_distance(a, b) -> float:
    """Sum of the two directional means of squared nearest-neighbour distances."""
    a, b = _coords(a), _coords(b)
    ab, _ = directional_sq_errors(a, b)
    ba, _ = directional_sq_errors(b, a)
    return float(ab.mean() + ba.mean())


def psnr_peak(original) -> float:
    """Squared bounding-box diagonal of ``original``."""
    c = _coords(original)
    return float(((c.max(axis=0) - c.min(axis=0)) ** 2).sum())


def mse_directional(original: PointCloud, reconstruction, mode: str = "D1") -> tuple[float, float]:
    """``(MSE o->r, MSE r->o)`` with point-to-point (D1) or normal-projected (D2) errors.

    D2 projects each displacement on the normal of the original-side point:
    the original's own normal for o->r and the nearest original's normal for r->o.
    """
    o = _coords(original)
    r = _coords(reconstruction)
    if mode == "D1":
        e_or, _ = directional_sq_errors(o, r)
        e_ro, _ = directional_sq_errors(r, o)
        return float(e_or.mean()), float(e_ro.mean())
    if mode != "D2":
        raise ValueError(f"unknown PSNR mode {mode!r}")
    normals = original.normals if isinstance(original, PointCloud) else None
    if normals is None:
        normals = estimate_normals(PointCloud(o), k=min(16, len(o))).normals
    nb_or = knn(r, o, 1).indices[:, 0]
    proj_or = ((r[nb_or] - o) * normals).sum(1) ** 2
    nb_ro = knn(o, r, 1).indices[:, 0]
    proj_ro = ((r - o[nb_ro]) * normals[nb_ro]).sum(1) ** 2
    return float(proj_or.mean()), float(proj_ro.mean())


def psnr_d(original, reconstruction, mode: str = "D1", conventional: bool = False) -> float:
    """``10 log10(3 Peak^2 / max(MSE_o->r, MSE_r->o))`` with Peak the squared diagonal.

    ``conventional=True`` uses the single-square peak (``3 diag^2 / MSE``).
    Returns ``inf`` when the error vanishes.
    """
    peak = psnr_peak(original)
    if peak == 0:
        raise MetricUndefinedError("original point cloud has zero extent")
    mse = max(mse_directional(original, reconstruction, mode))
    if mse == 0:
        return math.inf
    num = 3.0 * peak if conventional else 3.0 * peak ** 2
    return 10.0 * math.log10(num / mse)


def bd_rate(anchor, test) -> float:
    """Bjontegaard delta rate (percent) of ``test`` relative to ``anchor``.

    Each curve is a sequence of :class:`RDPoint` or ``(bpp, quality)`` pairs.
    Cubic fits of log10(rate) against quality are integrated over the common
    quality interval.
    """
    ra, qa = _curve(anchor)
    rt, qt = _curve(test)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise MetricUndefinedError("RD curves have no overlapping quality interval")
    pa = np.polyfit(qa, np.log10(ra), 3)
    pt = np.polyfit(qt, np.log10(rt), 3)
    ia, it = np.polyint(pa), np.polyint(pt)
    int_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    int_t = np.polyval(it, hi) - np.polyval(it, lo)
    return float((10.0 ** ((int_t - int_a) / (hi - lo)) - 1.0) * 100.0)


def _curve(points):
    pts = [(p.bpp, p.quality) if isinstance(p, RDPoint) else tuple(p) for p in points]
    if len(pts) < 4:
        raise ValueError(f"BD-rate needs at least 4 RD points, got {len(pts)}")
    arr = np.asarray(sorted(pts, key=lambda t: t[1]), dtype=np.float64)
    if np.any(arr[:, 0] <= 0):
        raise ValueError("BD-rate needs strictly positive rates")
    return arr[:, 0], arr[:, 1]


def write_rd_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "bpp", "quality"])
        for p in points:
            w.writerow([p.label, repr(float(p.bpp)), repr(float(p.quality))])


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        return [RDPoint(float(r["bpp"]), float(r["quality"]), r["label"]) for r in csv.DictReader(fh)]
