"""Field-sample label transforms."""

import numpy as np


def tsdf_label(y, delta):
    """Clip the signed distance to [-delta, delta] and map affinely to [0,1].

    Surface points land exactly on 0.5; deep inside maps to 0, far outside
    to 1. Works on scalars and arrays.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    y = np.asarray(y, dtype=np.float64)
    out = (np.clip(y, -delta, delta) + delta) / (2.0 * delta)
    return float(out) if out.ndim == 0 else out


def occupancy_label(y):
    """1 inside (y < 0), 0 outside; the boundary counts as outside."""
    y = np.asarray(y, dtype=np.float64)
    out = (y < 0).astype(np.float64)
    return float(out) if out.ndim == 0 else out
