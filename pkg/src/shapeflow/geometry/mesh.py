"""Triangle meshes: isosurface extraction, sampling, and persistence.

Extraction wraps skimage's marching cubes (256-case table with linear edge
interpolation and welded vertices) behind this module's conventions: grids
live on [-1,1]^3, fields increase outward, and triangle winding is fixed so
geometric normals point toward increasing field values. Zero-area triangles
are dropped after extraction.
"""

import json
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .sampling import SurfaceCloud


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V,3) float64
    triangles: np.ndarray  # (T,3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("negative triangle index")

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def face_normals(self):
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)


def grid_coords(res, bounds=(-1.0, 1.0)):
    """Per-axis lattice coordinates for a res^3 grid over the cube."""
    return np.linspace(bounds[0], bounds[1], res)


def evaluate_on_grid(field, res, bounds=(-1.0, 1.0), chunk=65536):
    """Evaluate field((n,3)) over the lattice; returns (res,res,res)."""
    lin = grid_coords(res, bounds)
    x, y, z = np.meshgrid(lin, lin, lin, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    out = np.empty(len(pts), dtype=np.float64)
    for start in range(0, len(pts), chunk):
        out[start : start + chunk] = field(pts[start : start + chunk])
    return out.reshape(res, res, res)


def marching_cubes(grid, iso=0.0, bounds=(-1.0, 1.0)):
    """Extract the iso-surface of a scalar lattice over the cube.

    The field is assumed to increase outward (signed-distance convention);
    returned winding makes geometric normals point toward increasing values.
    A grid that never crosses iso yields an empty mesh.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 8:
        raise ValueError("grid must be 3D with resolution >= 8 per axis")
    lo, hi = bounds
    spacing = tuple((hi - lo) / (s - 1) for s in grid.shape)
    if grid.min() >= iso or grid.max() <= iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        grid, level=iso, spacing=spacing, gradient_direction="ascent"
    )
    verts = verts + lo
    mesh = TriMesh(verts, faces.astype(np.int64))
    mesh = _orient_outward(mesh, grid, bounds)
    return _drop_degenerate(mesh)


def _orient_outward(mesh, grid, bounds):
    """Flip all triangles if normals disagree with the field gradient."""
    if mesh.is_empty:
        return mesh
    take = min(len(mesh.triangles), 128)
    tris = mesh.triangles[:take]
    cent = mesh.vertices[tris].mean(axis=1)
    n = np.cross(
        mesh.vertices[tris[:, 1]] - mesh.vertices[tris[:, 0]],
        mesh.vertices[tris[:, 2]] - mesh.vertices[tris[:, 0]],
    )
    g = _grid_gradient(grid, cent, bounds)
    if float((n * g).sum()) < 0.0:
        mesh.triangles = mesh.triangles[:, [0, 2, 1]]
    return mesh


def _grid_gradient(grid, pts, bounds):
    lo, hi = bounds
    res = np.array(grid.shape)
    h = (hi - lo) / (res - 1)
    grad = np.empty((len(pts), 3))
    for ax in range(3):
        dp = np.zeros(3)
        dp[ax] = h[ax] * 0.5
        grad[:, ax] = _trilinear(grid, pts + dp, bounds) - _trilinear(grid, pts - dp, bounds)
    return grad


def _trilinear(grid, pts, bounds=(-1.0, 1.0)):
    lo, hi = bounds
    res = np.array(grid.shape)
    scale = (res - 1) / (hi - lo)
    c = np.clip((pts - lo) * scale, 0, res - 1.000001)
    i0 = c.astype(np.int64)
    f = c - i0
    i1 = np.minimum(i0 + 1, res - 1)
    out = np.zeros(len(pts))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                out += wx * wy * wz * grid[ix, iy, iz]
    return out


def _drop_degenerate(mesh, eps=1e-14):
    if mesh.is_empty:
        return mesh
    keep = mesh.face_areas() > eps
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def mesh_edge_counts(mesh):
    """Map undirected edge -> number of incident triangles."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def euler_characteristic(mesh):
    """V - E + F over vertices actually referenced by triangles."""
    if mesh.is_empty:
        return 0
    v = len(np.unique(mesh.triangles))
    uniq, _ = mesh_edge_counts(mesh)
    return v - len(uniq) + len(mesh.triangles)


def sample_mesh_surface(mesh, n, seed):
    """Area-weighted surface samples with face normals."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(mesh.triangles), size=n, p=probs)
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = mesh.triangles[tri]
    a, b, c = mesh.vertices[t[:, 0]], mesh.vertices[t[:, 1]], mesh.vertices[t[:, 2]]
    pts = a + u * (b - a) + v * (c - a)
    fn = mesh.face_normals()[tri]
    fn = fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-16)
    return SurfaceCloud(pts, fn)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_ply_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_ply_mesh(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path} is not a PLY file")
    nv = nf = 0
    idx = 0
    for i, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            nv = int(ln.split()[-1])
        elif ln.startswith("element face"):
            nf = int(ln.split()[-1])
        elif ln == "end_header":
            idx = i + 1
            break
    verts = np.array([[float(x) for x in lines[idx + i].split()[:3]] for i in range(nv)])
    faces = np.array(
        [[int(x) for x in lines[idx + nv + i].split()[1:4]] for i in range(nf)],
        dtype=np.int64,
    ).reshape(-1, 3)
    return TriMesh(verts if nv else np.zeros((0, 3)), faces)


def save_ply_cloud(cloud, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float nx\nproperty float ny\nproperty float nz\nend_header\n")
        for p, n in zip(cloud.points, cloud.normals):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}\n")


def save_obj_mesh(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_grid(grid, path):
    """Raw little-endian f32 payload plus a JSON sidecar."""
    grid = np.ascontiguousarray(grid, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(grid.tobytes())
    sidecar = {"res": list(grid.shape), "bounds": [-1, 1]}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh)


def load_grid(path):
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    data = np.fromfile(path, dtype="<f4")
    return data.reshape(sidecar["res"]).astype(np.float32), sidecar
