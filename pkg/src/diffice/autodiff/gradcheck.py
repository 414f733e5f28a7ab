"""Central finite-difference oracle for the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tensor, grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: np.ndarray  # coordinates skipped as nondifferentiable within the step

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())


def _scalar(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    out = fn(Tensor(x))
    v = float(np.asarray(out.data).reshape(()))
    if not np.isfinite(v):
        raise NonFiniteError("finite_diff_check: function value is not finite")
    return v


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, *,
                      kink_tol: float | None = None) -> GradCheckResult:
    """Compare the taped gradient of scalar ``fn`` at ``point`` with central differences.

    Relative error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    With ``kink_tol`` set, coordinates whose one-sided slopes disagree by more than
    ``kink_tol`` (a ReLU kink inside the step) are excluded from the maximum.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = fn(xt)
    if out.size != 1:
        raise ValueError(f"finite_diff_check: function must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("finite_diff_check: function value is not finite")
    (analytic,) = grad(out, [xt])
    f0 = float(np.asarray(out.data).reshape(()))

    numeric = np.zeros_like(x0)
    excluded = np.zeros(x0.shape, dtype=bool)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(fn, x0)
        flat[i] = orig - step
        fm = _scalar(fn, x0)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        if kink_tol is not None:
            fwd = (fp - f0) / step
            bwd = (f0 - fm) / step
            excluded.reshape(-1)[i] = abs(fwd - bwd) > kink_tol * (abs(fwd) + abs(bwd) + 1e-8)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    rel = np.where(excluded, 0.0, rel)
    return GradCheckResult(float(rel.max()) if rel.size else 0.0, analytic, numeric, excluded)
