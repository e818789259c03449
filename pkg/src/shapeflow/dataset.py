"""Procedural dataset generation and the manifest that indexes it.

Shapes come in three categories: plain solids, CSG composites, and thin
shells (always at least 10% of entries). Condition kinds alternate 50/50
between appearance and normal. Everything is deterministic per seed, and the
manifest is byte-stable across runs.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .geometry.shapes import Primitive, ShapeSpec, domain_margin_ok

CATEGORIES = ("solid", "csg", "shell")
MAX_EXTENT = 0.95  # keeps a 0.05 margin to the domain wall
SHELL_THICKNESS_RANGE = (0.01, 0.04)


def _random_translate(rng, bound_radius, max_extent=MAX_EXTENT):
    room = max(max_extent - bound_radius, 0.0)
    return tuple(rng.uniform(-room, room, size=3))


def _random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return tuple(axis), float(rng.uniform(0.0, 180.0))


def _random_primitive(rng, kinds=("sphere", "box", "torus", "capsule"), scale=1.0):
    kind = kinds[rng.integers(len(kinds))]
    if kind == "sphere":
        params = {"radius": float(rng.uniform(0.18, 0.45) * scale)}
    elif kind == "box":
        params = {"half": [float(rng.uniform(0.12, 0.38) * scale) for _ in range(3)]}
    elif kind == "torus":
        major = float(rng.uniform(0.25, 0.5) * scale)
        params = {"major": major, "minor": float(rng.uniform(0.06, min(0.16, 0.55 * major)))}
    else:
        params = {
            "half_height": float(rng.uniform(0.1, 0.35) * scale),
            "radius": float(rng.uniform(0.1, 0.22) * scale),
        }
    axis, angle = _random_rotation(rng)
    prim = Primitive(kind, params, rotate_axis=axis, rotate_deg=angle)
    prim = Primitive(
        kind,
        params,
        translate=_random_translate(rng, prim.bounding_radius()),
        rotate_axis=axis,
        rotate_deg=angle,
    )
    return prim


def random_shape(rng, category, name=""):
    """One ShapeSpec of the requested category, inside the domain margin."""
    for _ in range(64):
        if category == "solid":
            spec = ShapeSpec([_random_primitive(rng)], name=name)
        elif category == "shell":
            base = _random_primitive(rng, kinds=("sphere", "box", "torus"))
            thickness = float(rng.uniform(*SHELL_THICKNESS_RANGE))
            spec = ShapeSpec([base], shell_thickness=thickness, name=name)
        elif category == "csg":
            n_extra = int(rng.integers(1, 3))
            prims = [_random_primitive(rng)]
            node = {"prim": 0}
            for i in range(n_extra):
                extra = _random_primitive(rng, scale=0.8)
                op = ("union", "difference", "union")[int(rng.integers(3))]
                if op == "difference":
                    # carve near the base so the cut actually lands
                    base_t = np.asarray(prims[0].translate)
                    jitter = rng.uniform(-0.25, 0.25, size=3)
                    extra = Primitive(
                        extra.kind,
                        extra.params,
                        translate=tuple(base_t + jitter),
                        rotate_axis=extra.rotate_axis,
                        rotate_deg=extra.rotate_deg,
                    )
                prims.append(extra)
                node = {"op": op, "children": [node, {"prim": i + 1}]}
            spec = ShapeSpec(prims, ops=node, name=name)
        else:
            raise ValueError(f"unknown category '{category}'")
        if domain_margin_ok(spec):
            return spec
    raise RuntimeError(f"could not generate a valid '{category}' shape")


def split_of(shape_id, seed):
    """Seed-stable 10% held-out split by hashing the shape id."""
    digest = hashlib.md5(f"{seed}:{shape_id}".encode()).hexdigest()
    return "held_out" if int(digest, 16) % 10 == 0 else "train"


def generate_dataset(n, seed, out_dir, solid_fraction=0.4, csg_fraction=0.4):
    """Write n shape JSONs plus a manifest; returns the manifest dict."""
    shell_fraction = 1.0 - solid_fraction - csg_fraction
    if shell_fraction < 0.1 - 1e-9:
        raise ValueError("thin-shell fraction must be at least 10%")
    out_dir = Path(out_dir)
    (out_dir / "shapes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_solid = int(round(solid_fraction * n))
    n_csg = int(round(csg_fraction * n))
    n_shell = n - n_solid - n_csg
    categories = ["solid"] * n_solid + ["csg"] * n_csg + ["shell"] * n_shell
    entries = []
    counts = {c: 0 for c in CATEGORIES}
    for i, category in enumerate(categories):
        shape_id = f"shape_{i:04d}"
        spec = random_shape(rng, category, name=shape_id)
        rel = f"shapes/{shape_id}.json"
        spec.save(out_dir / rel)
        entries.append(
            {
                "id": shape_id,
                "file": rel,
                "category": category,
                "kind": "appearance" if i % 2 == 0 else "normal",
                "split": split_of(shape_id, seed),
            }
        )
        counts[category] += 1
    manifest = {"seed": int(seed), "counts": counts, "entries": entries}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        manifest = json.load(fh)
    root = path.parent
    for entry in manifest["entries"]:
        f = root / entry["file"]
        if not f.exists():
            raise FileNotFoundError(f"manifest references missing shape file {f}")
        if entry["kind"] not in ("appearance", "normal"):
            raise ValueError(f"bad condition kind {entry['kind']!r}")
    n_shell = manifest["counts"].get("shell", 0)
    if n_shell < 0.1 * len(manifest["entries"]) - 1e-9:
        raise ValueError("manifest violates the >=10% thin-shell requirement")
    manifest["root"] = str(root)
    return manifest


def manifest_specs(manifest, split=None):
    """(entry, ShapeSpec) pairs, optionally filtered by split tag."""
    root = Path(manifest["root"])
    out = []
    for entry in manifest["entries"]:
        if split is not None and entry["split"] != split:
            continue
        out.append((entry, ShapeSpec.load(root / entry["file"])))
    return out
