"""Procedural ground-truth shapes with analytic signed distance fields.

A ShapeSpec is a list of rigidly-transformed primitives combined by a CSG
tree (union/intersection/difference via min/max, which is exact away from
medial axes and a conservative bound elsewhere). Distances are negative
inside. Everything lives in [-1,1]^3 and shapes are generated with a margin
to the domain boundary.

JSON persistence uses the versioned "shapespec/1" document layout.
"""

import json
from dataclasses import dataclass, field

import numpy as np

PRIMITIVE_KINDS = ("sphere", "box", "torus", "capsule", "shell")
CSG_OPS = ("union", "intersection", "difference")
SCHEMA = "shapespec/1"


def _rotation_matrix(axis, angle_deg):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    x, y, z = axis / n
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


@dataclass
class Primitive:
    kind: str
    params: dict
    translate: tuple = (0.0, 0.0, 0.0)
    rotate_axis: tuple = (0.0, 0.0, 1.0)
    rotate_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind '{self.kind}'")

    def rotation(self):
        return _rotation_matrix(self.rotate_axis, self.rotate_deg)

    def sdf(self, pts):
        """Signed distance at (n,3) world points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        local = (pts - np.asarray(self.translate)) @ self.rotation()
        return _primitive_sdf(self.kind, self.params, local)

    def bounding_radius(self):
        r = _primitive_radius(self.kind, self.params)
        return r + float(np.linalg.norm(self.translate))

    def to_json(self):
        return {
            "kind": self.kind,
            "params": self.params,
            "translate": list(self.translate),
            "rotate_axis": list(self.rotate_axis),
            "rotate_deg": self.rotate_deg,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            kind=obj["kind"],
            params=obj["params"],
            translate=tuple(obj.get("translate", (0, 0, 0))),
            rotate_axis=tuple(obj.get("rotate_axis", (0, 0, 1))),
            rotate_deg=float(obj.get("rotate_deg", 0.0)),
        )


def _primitive_sdf(kind, params, p):
    if kind == "sphere":
        return np.linalg.norm(p, axis=-1) - params["radius"]
    if kind == "box":
        half = np.asarray(params["half"], dtype=np.float64)
        q = np.abs(p) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    if kind == "torus":
        ring = np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2) - params["major"]
        return np.sqrt(ring**2 + p[:, 1] ** 2) - params["minor"]
    if kind == "capsule":
        hh = params["half_height"]
        y = p[:, 1] - np.clip(p[:, 1], -hh, hh)
        return np.sqrt(p[:, 0] ** 2 + y**2 + p[:, 2] ** 2) - params["radius"]
    if kind == "shell":
        base = params["base"]
        inner = _primitive_sdf(base["kind"], base["params"], p)
        return np.abs(inner) - 0.5 * params["thickness"]
    raise ValueError(f"unknown primitive kind '{kind}'")


def _primitive_radius(kind, params):
    if kind == "sphere":
        return params["radius"]
    if kind == "box":
        return float(np.linalg.norm(params["half"]))
    if kind == "torus":
        return params["major"] + params["minor"]
    if kind == "capsule":
        return params["half_height"] + params["radius"]
    if kind == "shell":
        base = params["base"]
        return _primitive_radius(base["kind"], base["params"]) + 0.5 * params["thickness"]
    raise ValueError(f"unknown primitive kind '{kind}'")


@dataclass
class ShapeSpec:
    """Primitives + CSG tree, optionally hollowed into a thin shell."""

    primitives: list
    ops: dict = None  # {"prim": i} or {"op": ..., "children": [...]}; None = union of all
    shell_thickness: float = None
    name: str = ""

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("ShapeSpec needs at least one primitive")
        if self.ops is None:
            node = {"prim": 0}
            for i in range(1, len(self.primitives)):
                node = {"op": "union", "children": [node, {"prim": i}]}
            self.ops = node

    def sdf(self, pts):
        """Signed distance at (n,3) points (negative inside)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        d = self._eval_node(self.ops, pts)
        if self.shell_thickness is not None:
            d = np.abs(d) - 0.5 * self.shell_thickness
        return d

    def _eval_node(self, node, pts):
        if "prim" in node:
            return self.primitives[node["prim"]].sdf(pts)
        op = node["op"]
        if op not in CSG_OPS:
            raise ValueError(f"unknown CSG op '{op}'")
        vals = [self._eval_node(c, pts) for c in node["children"]]
        if op == "union":
            out = vals[0]
            for v in vals[1:]:
                out = np.minimum(out, v)
            return out
        if op == "intersection":
            out = vals[0]
            for v in vals[1:]:
                out = np.maximum(out, v)
            return out
        out = vals[0]
        for v in vals[1:]:
            out = np.maximum(out, -v)
        return out

    def gradient(self, pts, h=1e-5):
        return sdf_gradient(self, pts, h)

    def to_json(self):
        return {
            "schema": SCHEMA,
            "name": self.name,
            "primitives": [p.to_json() for p in self.primitives],
            "ops": self.ops,
            "shell_thickness": self.shell_thickness,
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("schema") != SCHEMA:
            raise ValueError(f"unsupported shape schema {obj.get('schema')!r}")
        return cls(
            primitives=[Primitive.from_json(p) for p in obj["primitives"]],
            ops=obj["ops"],
            shell_thickness=obj.get("shell_thickness"),
            name=obj.get("name", ""),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def sdf_eval(spec, p):
    """Signed distance of a spec at a single point or (n,3) batch."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return float(spec.sdf(p[None, :])[0])
    return spec.sdf(p)


def sdf_gradient(spec, pts, h=1e-5):
    """Central-difference gradient of the analytic field at (n,3) points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    grad = np.empty_like(pts)
    for ax in range(3):
        dp = np.zeros(3)
        dp[ax] = h
        grad[:, ax] = (spec.sdf(pts + dp) - spec.sdf(pts - dp)) / (2.0 * h)
    return grad


def domain_margin_ok(spec, margin=0.05, probe=9):
    """Conservative check that the surface keeps `margin` from the domain wall."""
    lin = np.linspace(-1.0, 1.0, probe)
    faces = []
    for ax in range(3):
        for side in (-1.0, 1.0):
            u, v = np.meshgrid(lin, lin, indexing="ij")
            pts = np.zeros((probe * probe, 3))
            pts[:, ax] = side
            pts[:, (ax + 1) % 3] = u.ravel()
            pts[:, (ax + 2) % 3] = v.ravel()
            faces.append(pts)
    d = spec.sdf(np.concatenate(faces))
    return bool(d.min() >= margin)
