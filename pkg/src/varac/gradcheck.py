"""Central finite differences against a live parameter vector."""

from __future__ import annotations

import numpy as np


def finite_difference(scalar_fn, values: np.ndarray, delta: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar_fn with respect to ``values``.

    ``scalar_fn`` takes no arguments and reads ``values`` through shared
    views; entries are perturbed in place and restored.
    """
    grad = np.zeros_like(values)
    for i in range(values.size):
        original = values[i]
        values[i] = original + delta
        upper = scalar_fn()
        values[i] = original - delta
        lower = scalar_fn()
        values[i] = original
        grad[i] = (upper - lower) / (2.0 * delta)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-coordinate relative error with a scale-aware floor.

    Coordinates far below the gradient's overall magnitude are compared
    against that floor instead, which keeps finite-difference noise on
    near-zero entries from dominating.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
