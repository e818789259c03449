"""Reconstruction metrics: Chamfer distance, F-Score, normal consistency.

Nearest neighbors come from scipy's cKDTree (exact queries). Chamfer uses
plain L2 distances (not squared); callers report it x10^3.
"""

import numpy as np
from scipy.spatial import cKDTree


def _check_points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or len(a) == 0:
        raise ValueError(f"{name} must be a non-empty (n,3) point set")
    return a


def chamfer_distance(a, b):
    """Mean NN distance a->b plus mean NN distance b->a."""
    a = _check_points(a, "a")
    b = _check_points(b, "b")
    d_ab, _ = cKDTree(b).query(a, workers=-1)
    d_ba, _ = cKDTree(a).query(b, workers=-1)
    return float(d_ab.mean() + d_ba.mean())


def f_score(a, b, tau=0.02):
    """Harmonic mean of precision (a near b) and recall (b near a) at tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = _check_points(a, "a")
    b = _check_points(b, "b")
    d_ab, _ = cKDTree(b).query(a, workers=-1)
    d_ba, _ = cKDTree(a).query(b, workers=-1)
    precision = float((d_ab <= tau).mean())
    recall = float((d_ba <= tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def normal_consistency(a, b):
    """Symmetric mean |cos| between normals at nearest-neighbor pairings."""
    pa = _check_points(a.points, "a.points")
    pb = _check_points(b.points, "b.points")
    na = np.asarray(a.normals, dtype=np.float64)
    nb = np.asarray(b.normals, dtype=np.float64)
    for n, label in ((na, "a"), (nb, "b")):
        norms = np.linalg.norm(n, axis=1)
        if np.any(norms < 1e-8):
            raise ValueError(f"zero-length normal in cloud {label}")
    na = na / np.linalg.norm(na, axis=1, keepdims=True)
    nb = nb / np.linalg.norm(nb, axis=1, keepdims=True)
    _, i_ab = cKDTree(pb).query(pa, workers=-1)
    _, i_ba = cKDTree(pa).query(pb, workers=-1)
    cos_ab = np.abs((na * nb[i_ab]).sum(axis=1)).mean()
    cos_ba = np.abs((nb * na[i_ba]).sum(axis=1)).mean()
    return float(0.5 * (cos_ab + cos_ba))
