"""Classical fixed-step Runge-Kutta (RK4) integration for flow sampling."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import NumericsError

__all__ = ["rk4_integrate"]


def rk4_integrate(
    field: Callable[[np.ndarray, float], np.ndarray],
    y0: np.ndarray,
    t0: float,
    t1: float,
    steps: int,
) -> np.ndarray:
    """Integrate dy/dt = field(y, t) from t0 to t1 with `steps` RK4 steps.

    The field is evaluated on plain arrays (inference path, no gradients).
    Raises NumericsError naming the failing step if any stage derivative or
    state goes non-finite.
    """
    if steps < 1:
        raise NumericsError("rk4_integrate requires steps >= 1")
    y = np.array(y0, dtype=np.float64, copy=True)
    h = (float(t1) - float(t0)) / steps
    for i in range(steps):
        t = float(t0) + i * h
        k1 = np.asarray(field(y, t), dtype=np.float64)
        k2 = np.asarray(field(y + 0.5 * h * k1, t + 0.5 * h), dtype=np.float64)
        k3 = np.asarray(field(y + 0.5 * h * k2, t + 0.5 * h), dtype=np.float64)
        k4 = np.asarray(field(y + h * k3, t + h), dtype=np.float64)
        incr = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not np.all(np.isfinite(incr)):
            raise NumericsError(f"non-finite derivative at rk4 step {i} (t={t:.6f})")
        y = y + h * incr
        if not np.all(np.isfinite(y)):
            raise NumericsError(f"non-finite state after rk4 step {i} (t={t:.6f})")
    return y
