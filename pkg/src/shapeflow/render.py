"""Sphere-traced normal-map rendering of SDF-like fields.

Fields can be analytic shapes, trilinearly-interpolated grids (how decoder
predictions are rendered), or plain callables mapping (n,3) points to
distances. Rays march with distance-sized steps until |field| < eps or the
ray leaves the domain; hit normals are central differences of the field,
expressed in camera space (+z toward the viewer).

Grid marching has a numba kernel and a vectorized numpy fallback; meshes are
rendered by brute-force ray/triangle intersection (also numba-accelerated).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .accel import USE_NUMBA, njit
from .geometry.mesh import TriMesh
from .geometry.shapes import ShapeSpec

DOMAIN_RADIUS = np.sqrt(3.0)  # circumscribes [-1,1]^3


@dataclass
class Camera:
    eye: tuple
    look_at: tuple
    fov_deg: float = 40.0
    resolution: tuple = (128, 128)
    up: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if np.allclose(self.eye, self.look_at):
            raise ValueError("camera eye must differ from look_at")
        if not 10.0 <= self.fov_deg <= 120.0:
            raise ValueError("fov must lie in [10, 120] degrees")

    def basis(self):
        """Rows: right, up, back (toward the viewer). World->camera rotation."""
        eye = np.asarray(self.eye, dtype=np.float64)
        at = np.asarray(self.look_at, dtype=np.float64)
        back = eye - at
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(self.up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        up = np.cross(back, right)
        return np.stack([right, up, back])

    def rays(self):
        """Pixel-center ray origins and unit directions, row-major (h,w)."""
        w, h = self.resolution
        r = self.basis()
        eye = np.asarray(self.eye, dtype=np.float64)
        tan = np.tan(np.deg2rad(self.fov_deg) / 2.0)
        xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
        ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
        px, py = np.meshgrid(xs * tan * (w / h), ys * tan, indexing="xy")
        dirs = px[..., None] * r[0] + py[..., None] * r[1] - r[2]
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(eye, dirs.shape)
        return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def camera_preset(view="front", resolution=(128, 128)):
    """Fixed framing of the [-1,1]^3 domain."""
    presets = {
        "front": dict(eye=(0.0, 0.0, 2.5), up=(0.0, 1.0, 0.0)),
        "top": dict(eye=(0.0, 2.5, 0.0), up=(0.0, 0.0, -1.0)),
        "left": dict(eye=(-2.5, 0.0, 0.0), up=(0.0, 1.0, 0.0)),
    }
    if view not in presets:
        raise ValueError(f"unknown view '{view}' (use front|top|left)")
    p = presets[view]
    return Camera(eye=p["eye"], look_at=(0.0, 0.0, 0.0), fov_deg=40.0,
                  resolution=resolution, up=p["up"])


@dataclass
class NormalMap:
    """Per-pixel camera-space unit normals plus a hit mask."""

    normals: np.ndarray  # (h,w,3) float32, zeroed where miss
    mask: np.ndarray  # (h,w) bool

    @property
    def width(self):
        return self.normals.shape[1]

    @property
    def height(self):
        return self.normals.shape[0]

    @property
    def coverage(self):
        return float(self.mask.mean())


class GridField:
    """Trilinear interpolation of a scalar lattice over [-1,1]^3.

    Outside the cube the value is floored by the exact distance to the cube,
    so sphere tracing stays safe for rays approaching from the camera.
    """

    def __init__(self, values, bounds=(-1.0, 1.0)):
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("grid must be 3D")
        self.bounds = bounds

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def spacing(self):
        lo, hi = self.bounds
        return (hi - lo) / (self.values.shape[0] - 1)

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        lo, hi = self.bounds
        inner = _trilinear_np(self.values, pts, lo, hi)
        q = np.maximum(np.abs(pts) - hi, 0.0)
        box = np.sqrt((q * q).sum(axis=1))
        return np.where(box > 0.0, np.maximum(inner, box), inner)


def as_field(obj):
    """Normalize shapes/grids/callables into an (n,3)->(n,) field."""
    if isinstance(obj, GridField):
        return obj
    if isinstance(obj, ShapeSpec):
        return obj.sdf
    if callable(obj):
        return obj
    raise TypeError(f"cannot interpret {type(obj).__name__} as a field")


# ---------------------------------------------------------------------------
# trilinear sampling kernels
# ---------------------------------------------------------------------------


def _trilinear_np(values, pts, lo, hi):
    res = values.shape[0]
    scale = (res - 1) / (hi - lo)
    c = np.clip((pts - lo) * scale, 0.0, res - 1.000001)
    i0 = c.astype(np.int64)
    f = c - i0
    i1 = np.minimum(i0 + 1, res - 1)
    out = np.zeros(len(pts))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                out += wx * wy * wz * values[ix, iy, iz]
    return out


@njit(cache=True, inline="always")
def _tri_at(values, res, lo, inv_h, x, y, z):  # pragma: no cover - numba path
    cx = (x - lo) * inv_h
    cy = (y - lo) * inv_h
    cz = (z - lo) * inv_h
    if cx < 0.0:
        cx = 0.0
    if cy < 0.0:
        cy = 0.0
    if cz < 0.0:
        cz = 0.0
    m = res - 1.000001
    if cx > m:
        cx = m
    if cy > m:
        cy = m
    if cz > m:
        cz = m
    ix = int(cx)
    iy = int(cy)
    iz = int(cz)
    fx = cx - ix
    fy = cy - iy
    fz = cz - iz
    c000 = values[ix, iy, iz]
    c100 = values[ix + 1, iy, iz]
    c010 = values[ix, iy + 1, iz]
    c110 = values[ix + 1, iy + 1, iz]
    c001 = values[ix, iy, iz + 1]
    c101 = values[ix + 1, iy, iz + 1]
    c011 = values[ix, iy + 1, iz + 1]
    c111 = values[ix + 1, iy + 1, iz + 1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def _march_grid_numba(values, lo, hi, origins, dirs, max_steps, eps, step_scale):
    # pragma: no cover - numba path
    n = origins.shape[0]
    res = values.shape[0]
    inv_h = (res - 1) / (hi - lo)
    hits = np.zeros(n, dtype=np.bool_)
    pos = np.zeros((n, 3))
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        # slab intersection with the cube
        t0 = 0.0
        t1 = 1e30
        ok = True
        for ax in range(3):
            o = origins[i, ax]
            d = dirs[i, ax]
            if abs(d) < 1e-12:
                if o < lo or o > hi:
                    ok = False
                    break
            else:
                ta = (lo - o) / d
                tb = (hi - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
        if not ok or t0 > t1:
            continue
        t = t0 + 1e-6
        for _ in range(max_steps):
            if t > t1:
                break
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            f = _tri_at(values, res, lo, inv_h, x, y, z)
            if f < eps:
                t = t + f  # pull back onto the level set
                pos[i, 0] = ox + t * dx
                pos[i, 1] = oy + t * dy
                pos[i, 2] = oz + t * dz
                hits[i] = True
                break
            t += f * step_scale
    return pos, hits


def _march_field_np(fieldfn, origins, dirs, max_steps, eps, step_scale, t_max):
    """Vectorized active-set marcher for arbitrary python fields."""
    n = len(origins)
    t = np.zeros(n)
    hits = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    # start at the domain sphere to skip empty space in front of the camera
    oc = -(origins * dirs).sum(axis=1)
    d2 = (origins**2).sum(axis=1) - oc**2
    outside = d2 > DOMAIN_RADIUS**2
    active[outside] = False
    t = np.maximum(oc - np.sqrt(np.maximum(DOMAIN_RADIUS**2 - d2, 0.0)), 0.0)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = origins[idx] + t[idx, None] * dirs[idx]
        f = np.asarray(fieldfn(p), dtype=np.float64)
        hit = f < eps
        hit_idx = idx[hit]
        t[hit_idx] += f[hit]
        hits[hit_idx] = True
        active[hit_idx] = False
        go_idx = idx[~hit]
        t[go_idx] += f[~hit] * step_scale
        escaped = t[go_idx] > t_max
        active[go_idx[escaped]] = False
    pos = origins + t[:, None] * dirs
    return pos, hits


def sphere_trace(fieldlike, cam, max_steps=192, eps=1e-3, step_scale=0.9):
    """Render a normal map by ray marching the field from the camera.

    Normals are normalized central differences of the field at hit points,
    rotated into camera space. Misses are masked out and zeroed.
    """
    fieldobj = as_field(fieldlike)
    origins, dirs = cam.rays()
    if isinstance(fieldobj, GridField) and USE_NUMBA:
        lo, hi = fieldobj.bounds
        pos, hits = _march_grid_numba(
            fieldobj.values,
            float(lo),
            float(hi),
            origins,
            dirs,
            max_steps,
            eps,
            step_scale,
        )
    else:
        t_max = np.linalg.norm(np.asarray(cam.eye, dtype=np.float64)) + DOMAIN_RADIUS + 0.5
        pos, hits = _march_field_np(fieldobj, origins, dirs, max_steps, eps, step_scale, t_max)
    w, h = cam.resolution
    normals = np.zeros((h * w, 3), dtype=np.float64)
    if hits.any():
        hstep = fieldobj.spacing * 0.5 if isinstance(fieldobj, GridField) else 1e-4
        p = pos[hits]
        grad = np.empty_like(p)
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = hstep
            grad[:, ax] = np.asarray(fieldobj(p + dp)) - np.asarray(fieldobj(p - dp))
        norm = np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)
        normals[hits] = (grad / norm) @ cam.basis().T
    return NormalMap(
        normals.reshape(h, w, 3).astype(np.float32),
        hits.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# mesh raycasting
# ---------------------------------------------------------------------------


@njit(cache=True)
def _raycast_mesh_numba(v0, e1, e2, origins, dirs):  # pragma: no cover - numba path
    n = origins.shape[0]
    m = v0.shape[0]
    t_hit = np.full(n, 1e30)
    tri_hit = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        for j in range(m):
            e1x, e1y, e1z = e1[j, 0], e1[j, 1], e1[j, 2]
            e2x, e2y, e2z = e2[j, 0], e2[j, 1], e2[j, 2]
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < 1e-12:
                continue
            inv = 1.0 / det
            tx = ox - v0[j, 0]
            ty = oy - v0[j, 1]
            tz = oz - v0[j, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if 1e-6 < t < t_hit[i]:
                t_hit[i] = t
                tri_hit[i] = j
    return t_hit, tri_hit


def _raycast_mesh_np(v0, e1, e2, origins, dirs, chunk=2048):
    n = len(origins)
    t_hit = np.full(n, 1e30)
    tri_hit = np.full(n, -1, dtype=np.int64)
    for start in range(0, n, chunk):
        o = origins[start : start + chunk]
        d = dirs[start : start + chunk]
        p = np.cross(d[:, None, :], e2[None, :, :])
        det = (e1[None] * p).sum(-1)
        safe = np.abs(det) > 1e-12
        inv = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        tvec = o[:, None, :] - v0[None]
        u = (tvec * p).sum(-1) * inv
        q = np.cross(tvec, e1[None, :, :])
        v = (d[:, None, :] * q).sum(-1) * inv
        t = (e2[None] * q).sum(-1) * inv
        valid = safe & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 1e-6)
        t = np.where(valid, t, 1e30)
        best = t.argmin(axis=1)
        rows = np.arange(len(o))
        tb = t[rows, best]
        hit = tb < 1e30
        t_hit[start : start + len(o)][hit] = tb[hit]
        tri_hit[start : start + len(o)][hit] = best[hit]
    return t_hit, tri_hit


def render_mesh(mesh, cam):
    """Normal map of a triangle mesh via closest-hit raycasting."""
    origins, dirs = cam.rays()
    w, h = cam.resolution
    if mesh.is_empty:
        return NormalMap(np.zeros((h, w, 3), dtype=np.float32), np.zeros((h, w), dtype=bool))
    v = mesh.vertices
    t = mesh.triangles
    v0 = np.ascontiguousarray(v[t[:, 0]])
    e1 = np.ascontiguousarray(v[t[:, 1]] - v[t[:, 0]])
    e2 = np.ascontiguousarray(v[t[:, 2]] - v[t[:, 0]])
    if USE_NUMBA:
        t_hit, tri_hit = _raycast_mesh_numba(v0, e1, e2, origins, dirs)
    else:
        t_hit, tri_hit = _raycast_mesh_np(v0, e1, e2, origins, dirs)
    hits = tri_hit >= 0
    normals = np.zeros((len(origins), 3))
    if hits.any():
        fn = np.cross(e1[tri_hit[hits]], e2[tri_hit[hits]])
        fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-16)
        # face the viewer regardless of stored winding
        facing = (fn * dirs[hits]).sum(axis=1) > 0
        fn[facing] = -fn[facing]
        normals[hits] = fn @ cam.basis().T
    return NormalMap(
        normals.reshape(h, w, 3).astype(np.float32),
        hits.reshape(h, w),
    )


def render_any(obj, cam, **kw):
    if isinstance(obj, TriMesh):
        return render_mesh(obj, cam)
    return sphere_trace(obj, cam, **kw)


# ---------------------------------------------------------------------------
# descriptors and shading
# ---------------------------------------------------------------------------


def normal_map_descriptor(nmap, blocks=(8, 8)):
    """Blockwise (mean normal, coverage) features, L2-normalized.

    Returns (vector, empty_flag); a fully-miss map yields the zero vector
    with the flag set.
    """
    bx, by = blocks
    h, w = nmap.mask.shape
    if w % bx or h % by:
        raise ValueError(f"blocks {blocks} must divide resolution {(w, h)}")
    sh, sw = h // by, w // bx
    n = nmap.normals.reshape(by, sh, bx, sw, 3)
    m = nmap.mask.reshape(by, sh, bx, sw)
    mean_n = n.mean(axis=(1, 3))  # misses are zeroed, so this is coverage-weighted
    cover = m.mean(axis=(1, 3))
    feat = np.concatenate([mean_n, cover[..., None]], axis=-1).reshape(-1)
    norm = np.linalg.norm(feat)
    if norm < 1e-12:
        return np.zeros_like(feat, dtype=np.float64), True
    return (feat / norm).astype(np.float64), False


def descriptor_cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return -1.0
    return float(np.dot(a, b) / (na * nb))


def lambert_shade(nmap, light=(0.4, 0.6, 0.7), ambient=0.15):
    """Single-light diffuse shading of a camera-space normal map."""
    l = np.asarray(light, dtype=np.float64)
    l /= np.linalg.norm(l)
    lum = np.clip((nmap.normals @ l), 0.0, 1.0) * (1.0 - ambient) + ambient
    lum = lum * nmap.mask
    return np.repeat(lum[..., None], 3, axis=-1).astype(np.float32)


def shaded_map(nmap, light=(0.4, 0.6, 0.7)):
    """Appearance stand-in: NormalMap carrying shaded grey in place of normals."""
    return NormalMap(lambert_shade(nmap, light), nmap.mask.copy())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_normal_map_png(nmap, path):
    from PIL import Image

    rgb = ((nmap.normals + 1.0) * 0.5 * 255.0).clip(0, 255).astype(np.uint8)
    alpha = (nmap.mask * 255).astype(np.uint8)
    rgba = np.concatenate([rgb, alpha[..., None]], axis=-1)
    Image.fromarray(rgba, mode="RGBA").save(path)


def save_normal_map_raw(nmap, path):
    data = np.concatenate(
        [nmap.normals.astype("<f4"), nmap.mask[..., None].astype("<f4")], axis=-1
    )
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(data).tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump({"height": nmap.height, "width": nmap.width, "channels": 4}, fh)


def load_normal_map_raw(path):
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype="<f4").reshape(meta["height"], meta["width"], 4)
    return NormalMap(data[..., :3].astype(np.float32), data[..., 3] > 0.5)
