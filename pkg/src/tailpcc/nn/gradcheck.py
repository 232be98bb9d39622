"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor


@dataclass
class GradCheckResult:
    checked: int
    passed: int
    worst_rel: float

    @property
    def fraction(self) -> float:
        return self.passed / max(self.checked, 1)


def gradcheck(loss_fn, params, h: float = 1e-5, rel_tol: float = 1e-4, abs_floor: float = 1e-9,
              max_per_param: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``params`` is a mapping or list of leaf tensors. A coordinate passes when
    ``|analytic - numeric| <= rel_tol * max(|analytic|, |numeric|)`` or the
    difference is below ``abs_floor`` (round-off level for vanishing entries).
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.grad = None
        # perturbations go through a flat view, which must not be a copy
        p.data = np.ascontiguousarray(p.data)
    out = loss_fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    checked = passed = 0
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            coords = rng.choice(flat.size, max_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _value(loss_fn())
            flat[i] = orig - h
            fm = _value(loss_fn())
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = ga.reshape(-1)[i]
            diff = abs(a - num)
            scale = max(abs(a), abs(num))
            rel = diff / scale if scale > 0 else 0.0
            ok = diff <= rel_tol * scale or diff <= abs_floor
            checked += 1
            passed += ok
            if not ok:
                worst = max(worst, rel)
    return GradCheckResult(int(checked), int(passed), float(worst))


def _value(t) -> float:
    return float(t.data if isinstance(t, Tensor) else t)
