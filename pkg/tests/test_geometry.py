import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeflow.geometry import (
    SurfaceSamplingError,
    chamfer_distance,
    euler_characteristic,
    evaluate_on_grid,
    f_score,
    farthest_point_sampling,
    marching_cubes,
    mesh_edge_counts,
    normal_consistency,
    occupancy_label,
    sample_mesh_surface,
    sample_surface,
    sample_volume,
    sdf_eval,
    tsdf_label,
)
from shapeflow.geometry.mesh import TriMesh, load_grid, load_ply_mesh, save_grid, save_ply_mesh
from shapeflow.geometry.sampling import SurfaceCloud
from shapeflow.geometry.shapes import Primitive, ShapeSpec, domain_margin_ok


class TestSdfEval:
    def test_sphere_center(self, sphere_spec):
        assert sdf_eval(sphere_spec, (0.0, 0.0, 0.0)) == pytest.approx(-0.5)

    def test_sphere_radial(self, sphere_spec):
        assert sdf_eval(sphere_spec, (1.0, 0.0, 0.0)) == pytest.approx(0.5)

    def test_union_of_box_and_sphere(self):
        spec = ShapeSpec([
            Primitive("box", {"half": [0.3, 0.3, 0.3]}),
            Primitive("sphere", {"radius": 0.2}, translate=(0.5, 0.0, 0.0)),
        ])
        assert sdf_eval(spec, (0.5, 0.0, 0.0)) == pytest.approx(-0.2)

    def test_difference(self):
        spec = ShapeSpec(
            [Primitive("sphere", {"radius": 0.5}),
             Primitive("sphere", {"radius": 0.25})],
            ops={"op": "difference", "children": [{"prim": 0}, {"prim": 1}]},
        )
        assert sdf_eval(spec, (0.0, 0.0, 0.0)) == pytest.approx(0.25)  # carved out
        assert sdf_eval(spec, (0.4, 0.0, 0.0)) < 0

    def test_shell_hollows(self, sphere_spec):
        shell = ShapeSpec([Primitive("sphere", {"radius": 0.5})], shell_thickness=0.04)
        assert sdf_eval(shell, (0.5, 0.0, 0.0)) == pytest.approx(-0.02)
        assert sdf_eval(shell, (0.0, 0.0, 0.0)) == pytest.approx(0.48)

    def test_rigid_transform(self):
        spec = ShapeSpec([Primitive("box", {"half": [0.4, 0.1, 0.1]},
                                    rotate_axis=(0, 0, 1), rotate_deg=90.0)])
        # the long axis now points along y
        assert sdf_eval(spec, (0.0, 0.35, 0.0)) < 0
        assert sdf_eval(spec, (0.35, 0.0, 0.0)) > 0


class TestLabels:
    def test_tsdf_fixed_points(self):
        assert tsdf_label(0.0, 0.05) == pytest.approx(0.5)
        assert tsdf_label(-0.2, 0.05) == pytest.approx(0.0)
        assert tsdf_label(0.025, 0.05) == pytest.approx(0.75)
        assert tsdf_label(0.05, 0.05) == pytest.approx(1.0)
        assert tsdf_label(-0.05, 0.05) == pytest.approx(0.0)

    @given(st.floats(-2, 2, allow_nan=False), st.floats(-2, 2, allow_nan=False),
           st.floats(0.001, 0.5))
    @settings(max_examples=200, deadline=None)
    def test_tsdf_monotone_and_bounded(self, y1, y2, delta):
        l1, l2 = tsdf_label(y1, delta), tsdf_label(y2, delta)
        assert 0.0 <= l1 <= 1.0
        if y1 <= y2:
            assert l1 <= l2

    @given(st.floats(0.001, 0.5))
    @settings(max_examples=50, deadline=None)
    def test_tsdf_surface_is_midpoint(self, delta):
        assert tsdf_label(0.0, delta) == pytest.approx(0.5)

    def test_tsdf_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            tsdf_label(0.1, 0.0)

    def test_occupancy(self):
        assert occupancy_label(-0.1) == 1.0
        assert occupancy_label(0.1) == 0.0
        assert occupancy_label(0.0) == 0.0  # boundary counts as outside


class TestSurfaceSampling:
    def test_sphere_level_set(self, sphere_spec):
        cloud = sample_surface(sphere_spec, 1000, seed=1)
        r = np.linalg.norm(cloud.points, axis=1)
        assert r.min() >= 0.4999 and r.max() <= 0.5001

    def test_determinism(self, sphere_spec):
        a = sample_surface(sphere_spec, 500, seed=2)
        b = sample_surface(sphere_spec, 500, seed=2)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.normals, b.normals)

    def test_sphere_normals_radial(self, sphere_spec):
        cloud = sample_surface(sphere_spec, 500, seed=3)
        radial = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
        assert np.linalg.norm(cloud.normals - radial, axis=1).max() < 1e-3

    def test_unit_normals(self, torus_spec):
        cloud = sample_surface(torus_spec, 500, seed=4)
        norms = np.linalg.norm(cloud.normals, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-4

    def test_n_must_be_positive(self, sphere_spec):
        with pytest.raises(ValueError):
            sample_surface(sphere_spec, 0, seed=0)


class TestVolumeSampling:
    def test_uniform_case_is_uniform(self, sphere_spec):
        fs = sample_volume(sphere_spec, 10000, 0.0, 0.02, seed=3)
        assert np.all(np.abs(fs.coords) <= 1.0)
        # each axis should be close to uniform on [-1,1]
        for ax in range(3):
            hist, _ = np.histogram(fs.coords[:, ax], bins=10, range=(-1, 1))
            assert hist.min() > 700 and hist.max() < 1300

    def test_all_on_surface(self, sphere_spec):
        fs = sample_volume(sphere_spec, 500, 1.0, 0.0, seed=4)
        assert np.abs(fs.sdf).max() < 1e-3

    def test_inside_fraction_matches_volume_ratio(self, sphere_spec):
        fs = sample_volume(sphere_spec, 100000, 0.0, 0.02, seed=5)
        expected = (4.0 / 3.0) * np.pi * 0.5**3 / 8.0
        assert abs((fs.sdf < 0).mean() - expected) < 0.01

    def test_labels_match_spec_eval(self, torus_spec):
        fs = sample_volume(torus_spec, 2000, 0.5, 0.03, seed=6)
        direct = torus_spec.sdf(fs.coords)
        assert np.abs(fs.sdf - direct).max() < 1e-5

    def test_normals_only_near_surface(self, sphere_spec):
        fs = sample_volume(sphere_spec, 5000, 0.5, 0.05, seed=7, normal_band=0.05)
        assert np.all(np.abs(fs.sdf[fs.has_normal]) < 0.05)
        norms = np.linalg.norm(fs.normals[fs.has_normal], axis=1)
        assert np.abs(norms - 1.0).max() < 1e-4

    def test_near_fraction_bounds(self, sphere_spec):
        with pytest.raises(ValueError):
            sample_volume(sphere_spec, 100, 1.5, 0.02, seed=0)


class TestFPS:
    def test_collinear_k2(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
        assert farthest_point_sampling(pts, 2, start=0).tolist() == [0, 3]

    def test_collinear_k3(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
        assert farthest_point_sampling(pts, 3, start=0).tolist() == [0, 3, 2]

    def test_exhaustion_is_permutation(self, rng):
        pts = rng.normal(size=(20, 3))
        idx = farthest_point_sampling(pts, 20, start=5)
        assert sorted(idx.tolist()) == list(range(20))

    def test_k_out_of_range(self, rng):
        with pytest.raises(ValueError):
            farthest_point_sampling(rng.normal(size=(5, 3)), 6)

    def test_deterministic_given_start(self, rng):
        pts = rng.normal(size=(100, 3))
        a = farthest_point_sampling(pts, 10, start=3)
        b = farthest_point_sampling(pts, 10, start=3)
        assert np.array_equal(a, b)

    def test_maximin_beats_random_subsets(self, rng):
        # FPS maximin spacing should beat a random subset almost always
        wins = 0
        trials = 1000
        pts = rng.normal(size=(64, 3))
        fps_idx = farthest_point_sampling(pts, 8, start=0)
        fps_val = _maximin(pts[fps_idx])
        for _ in range(trials):
            rand_idx = rng.choice(64, size=8, replace=False)
            if fps_val >= _maximin(pts[rand_idx]):
                wins += 1
        assert wins >= 950

    def test_numba_and_numpy_agree(self, rng):
        from shapeflow.geometry.sampling import _fps_numba, _fps_numpy
        from shapeflow.accel import USE_NUMBA

        pts = rng.normal(size=(200, 3))
        if USE_NUMBA:
            assert np.array_equal(_fps_numba(pts, 17, 4), _fps_numpy(pts, 17, 4))


def _maximin(subset):
    d = np.linalg.norm(subset[:, None] - subset[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min()


class TestMarchingCubes:
    def test_sphere_vertex_bound(self, sphere_spec):
        grid = evaluate_on_grid(sphere_spec.sdf, 64)
        mesh = marching_cubes(grid, 0.0)
        r = np.linalg.norm(mesh.vertices, axis=1)
        voxel_diag = np.sqrt(3) * 2.0 / 63
        assert np.abs(r - 0.5).max() <= voxel_diag

    def test_all_positive_gives_empty(self):
        mesh = marching_cubes(np.ones((16, 16, 16)), 0.0)
        assert mesh.is_empty

    def test_sphere_euler_characteristic(self, sphere_spec):
        grid = evaluate_on_grid(sphere_spec.sdf, 48)
        assert euler_characteristic(marching_cubes(grid, 0.0)) == 2

    def test_torus_euler_characteristic(self, torus_spec):
        grid = evaluate_on_grid(torus_spec.sdf, 64)
        assert euler_characteristic(marching_cubes(grid, 0.0)) == 0

    @pytest.mark.parametrize("fixture", ["sphere_spec", "torus_spec", "box_spec"])
    def test_edge_manifold(self, fixture, request):
        spec = request.getfixturevalue(fixture)
        grid = evaluate_on_grid(spec.sdf, 48)
        _, counts = mesh_edge_counts(marching_cubes(grid, 0.0))
        assert (counts == 2).all()

    def test_winding_points_outward(self, sphere_spec):
        grid = evaluate_on_grid(sphere_spec.sdf, 32)
        mesh = marching_cubes(grid, 0.0)
        centroids = mesh.vertices[mesh.triangles].mean(axis=1)
        outward = (mesh.face_normals() * centroids).sum(axis=1)
        assert (outward > 0).all()

    def test_rejects_tiny_grids(self):
        with pytest.raises(ValueError):
            marching_cubes(np.zeros((4, 4, 4)), 0.0)

    def test_no_degenerate_triangles(self, torus_spec):
        grid = evaluate_on_grid(torus_spec.sdf, 32)
        mesh = marching_cubes(grid, 0.0)
        assert mesh.face_areas().min() > 1e-14


class TestMetrics:
    def test_chamfer_identical_zero(self, rng):
        a = rng.normal(size=(50, 3))
        assert chamfer_distance(a, a) == 0.0

    def test_chamfer_single_points(self):
        assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)

    def test_chamfer_means(self):
        a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        b = np.array([[1.0, 0, 0]])
        assert chamfer_distance(a, b) == pytest.approx(2.0)

    def test_chamfer_symmetric(self, rng):
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a))

    def test_chamfer_translation_bound(self, rng):
        a = rng.normal(size=(60, 3))
        b = rng.normal(size=(60, 3))
        base = chamfer_distance(a, b)
        for t in (0.05, 0.2):
            shifted = chamfer_distance(a, b + np.array([t, 0, 0]))
            assert shifted <= base + 2 * t + 1e-9

    def test_chamfer_empty_raises(self):
        with pytest.raises(ValueError):
            chamfer_distance(np.zeros((0, 3)), np.zeros((1, 3)))

    def test_fscore_identical(self, rng):
        a = rng.normal(size=(50, 3))
        assert f_score(a, a, 0.1) == 1.0

    def test_fscore_disjoint(self):
        a = np.zeros((5, 3))
        b = np.ones((5, 3)) * 10
        assert f_score(a, b, 0.5) == 0.0

    def test_fscore_harmonic_mean(self):
        a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[0.0, 0, 0]])
        assert f_score(a, b, 0.5) == pytest.approx(2.0 / 3.0)

    def test_fscore_symmetric(self, rng):
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
        assert f_score(a, b, 0.3) == pytest.approx(f_score(b, a, 0.3))

    def test_nc_self_is_one(self, rng):
        pts = rng.normal(size=(30, 3))
        n = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        cloud = SurfaceCloud(pts, n)
        assert normal_consistency(cloud, cloud) == pytest.approx(1.0)

    def test_nc_negated_normals(self, rng):
        pts = rng.normal(size=(30, 3))
        n = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        a = SurfaceCloud(pts, n)
        b = SurfaceCloud(pts.copy(), -n)
        assert normal_consistency(a, b) == pytest.approx(1.0)

    def test_nc_orthogonal(self):
        pts = np.array([[float(i), 0, 0] for i in range(10)])
        a = SurfaceCloud(pts, np.tile([0.0, 0, 1], (10, 1)))
        b = SurfaceCloud(pts.copy(), np.tile([0.0, 1, 0], (10, 1)))
        assert normal_consistency(a, b) == pytest.approx(0.0)

    def test_nc_zero_normal_raises(self):
        pts = np.zeros((3, 3))
        cloud = SurfaceCloud(pts, np.zeros((3, 3)))
        with pytest.raises(ValueError):
            normal_consistency(cloud, cloud)

    def test_nc_symmetric(self, rng):
        def make(n, seed):
            r = np.random.default_rng(seed)
            pts = r.normal(size=(n, 3))
            nn = r.normal(size=(n, 3))
            return SurfaceCloud(pts, nn / np.linalg.norm(nn, axis=1, keepdims=True))

        a, b = make(25, 1), make(35, 2)
        assert normal_consistency(a, b) == pytest.approx(normal_consistency(b, a))


class TestMeshUtilities:
    def test_mesh_sampling_on_surface(self, sphere_spec):
        grid = evaluate_on_grid(sphere_spec.sdf, 48)
        mesh = marching_cubes(grid, 0.0)
        cloud = sample_mesh_surface(mesh, 2000, seed=0)
        assert np.abs(sphere_spec.sdf(cloud.points)).max() < 0.01

    def test_index_validation(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((2, 3)), np.array([[0, 1, 5]]))

    def test_ply_round_trip(self, tmp_path, sphere_spec):
        grid = evaluate_on_grid(sphere_spec.sdf, 24)
        mesh = marching_cubes(grid, 0.0)
        path = tmp_path / "m.ply"
        save_ply_mesh(mesh, path)
        again = load_ply_mesh(path)
        assert np.allclose(again.vertices, mesh.vertices, atol=1e-5)
        assert np.array_equal(again.triangles, mesh.triangles)

    def test_grid_round_trip(self, tmp_path, rng):
        grid = rng.normal(size=(8, 9, 10)).astype(np.float32)
        path = tmp_path / "g.f32"
        save_grid(grid, path)
        again, sidecar = load_grid(path)
        assert np.array_equal(again, grid)
        assert sidecar["res"] == [8, 9, 10]
        assert sidecar["bounds"] == [-1, 1]


class TestShapeSpecInfra:
    def test_json_round_trip(self, tmp_path, rng):
        spec = ShapeSpec(
            [Primitive("torus", {"major": 0.4, "minor": 0.1},
                       translate=(0.1, -0.05, 0.0), rotate_axis=(1, 1, 0), rotate_deg=40.0)],
            shell_thickness=0.03,
            name="x",
        )
        path = tmp_path / "s.json"
        spec.save(path)
        again = ShapeSpec.load(path)
        pts = rng.uniform(-1, 1, (200, 3))
        assert np.allclose(spec.sdf(pts), again.sdf(pts))

    def test_schema_version_enforced(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": "shapespec/99", "primitives": [], "ops": null}')
        with pytest.raises(ValueError):
            ShapeSpec.load(path)

    def test_margin_check(self, sphere_spec):
        assert domain_margin_ok(sphere_spec)
        big = ShapeSpec([Primitive("sphere", {"radius": 0.99})])
        assert not domain_margin_ok(big)
