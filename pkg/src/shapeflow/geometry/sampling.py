"""Point sampling against analytic shapes: surface clouds, volume labels, FPS."""

from dataclasses import dataclass

import numpy as np

from ..accel import USE_NUMBA, njit


class SurfaceSamplingError(RuntimeError):
    """Raised when surface projection keeps failing for a shape."""


@dataclass
class SurfaceCloud:
    """Points on the zero level set with unit outward normals."""

    points: np.ndarray  # (n,3) float64
    normals: np.ndarray  # (n,3) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.points.shape != self.normals.shape or self.points.shape[-1] != 3:
            raise ValueError("points and normals must both be (n,3)")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class FieldSamples:
    """Volume supervision points: coordinate, signed distance, optional normal."""

    coords: np.ndarray  # (m,3)
    sdf: np.ndarray  # (m,)
    normals: np.ndarray  # (m,3); rows meaningful only where has_normal
    has_normal: np.ndarray  # (m,) bool

    def __len__(self):
        return self.coords.shape[0]

    def subset(self, idx):
        return FieldSamples(
            self.coords[idx], self.sdf[idx], self.normals[idx], self.has_normal[idx]
        )


def _project_to_surface(spec, pts, tol=1e-4, max_iter=64):
    """Sphere-trace points onto the zero level set with Newton-sized steps.

    Steps follow -sdf * grad/|grad|^2; for a true distance field this is the
    unit-gradient Newton update. Returns (points, converged mask).
    """
    p = np.array(pts, dtype=np.float64)
    active = np.ones(len(p), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        d = spec.sdf(p[active])
        done = np.abs(d) < tol
        g = spec.gradient(p[active][~done])
        gn2 = np.maximum((g * g).sum(axis=1), 1e-12)
        step = (d[~done] / gn2)[:, None] * g
        idx = np.flatnonzero(active)
        p[idx[~done]] -= step
        active[idx[done]] = False
    final = np.abs(spec.sdf(p)) < tol
    return p, final


def sample_surface(spec, n, seed):
    """Uniform-ish surface cloud by projecting random volume points.

    Non-converged projections are rejected and redrawn; gives up after 10n
    total draws. Normals are the normalized analytic gradient.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    accepted = []
    total_drawn = 0
    while sum(len(a) for a in accepted) < n:
        if total_drawn >= 10 * n and total_drawn > 0:
            raise SurfaceSamplingError(
                f"surface sampling failed: {total_drawn} draws for {n} points"
            )
        batch = min(max(2 * n, 256), 10 * n - total_drawn)
        cand = rng.uniform(-1.0, 1.0, size=(batch, 3))
        total_drawn += batch
        proj, ok = _project_to_surface(spec, cand)
        inside = np.all(np.abs(proj) <= 1.0, axis=1)
        accepted.append(proj[ok & inside])
    pts = np.concatenate(accepted)[:n]
    g = spec.gradient(pts)
    normals = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return SurfaceCloud(pts, normals)


def sample_volume(spec, m, near_fraction, sigma, seed, normal_band=0.05):
    """Supervision samples: near-surface Gaussian offsets plus uniform fill.

    near_fraction*m points start on the surface and move along the normal by
    N(0, sigma^2); the rest are uniform in [-1,1]^3. Normals attach wherever
    |sdf| < normal_band.
    """
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0,1]")
    rng = np.random.default_rng(seed)
    n_near = int(round(near_fraction * m))
    parts = []
    if n_near > 0:
        cloud = sample_surface(spec, n_near, rng.integers(2**63))
        offsets = rng.normal(0.0, sigma, size=n_near) if sigma > 0 else np.zeros(n_near)
        pts = cloud.points + offsets[:, None] * cloud.normals
        parts.append(np.clip(pts, -1.0, 1.0))
    if m - n_near > 0:
        parts.append(rng.uniform(-1.0, 1.0, size=(m - n_near, 3)))
    coords = np.concatenate(parts) if parts else np.zeros((0, 3))
    sdf = spec.sdf(coords)
    has_normal = np.abs(sdf) < normal_band
    normals = np.zeros_like(coords)
    if has_normal.any():
        g = spec.gradient(coords[has_normal])
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        ok = norm[:, 0] > 1e-8
        unit = np.zeros_like(g)
        unit[ok] = g[ok] / norm[ok]
        normals[has_normal] = unit
        flat = np.flatnonzero(has_normal)
        has_normal[flat[~ok]] = False
    return FieldSamples(coords, sdf, normals, has_normal)


# ---------------------------------------------------------------------------
# farthest point sampling
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fps_numba(pts, k, start):  # pragma: no cover - numba path
    n = pts.shape[0]
    out = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(k):
        out[i] = cur
        best = -1.0
        nxt = 0
        cx, cy, cz = pts[cur, 0], pts[cur, 1], pts[cur, 2]
        for j in range(n):
            dx = pts[j, 0] - cx
            dy = pts[j, 1] - cy
            dz = pts[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < dist[j]:
                dist[j] = d
            if dist[j] > best:
                best = dist[j]
                nxt = j
        cur = nxt
    return out


def _fps_numpy(pts, k, start):
    n = pts.shape[0]
    out = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(k):
        out[i] = cur
        d = ((pts - pts[cur]) ** 2).sum(axis=1)
        np.minimum(dist, d, out=dist)
        cur = int(np.argmax(dist))
    return out


def farthest_point_sampling(points, k, start=0):
    """Greedy maximin subset: each pick maximizes distance to the chosen set."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    start = int(start) % n
    if USE_NUMBA:
        return _fps_numba(points, k, start)
    return _fps_numpy(points, k, start)
