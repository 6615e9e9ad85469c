import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoifit import geometry as geo
from hoifit.errors import DegenerateConfiguration, NotWatertight


def random_rotation(rng):
    v = rng.normal(size=3)
    return geo.axis_angle_to_quat(v)


class TestFitSimilarity:
    def test_exact_rotation_translation(self):
        rng = np.random.default_rng(0)
        src = rng.random((8, 3))
        pose = geo.Pose6D(geo.axis_angle_to_quat([0, 0, np.pi / 2]), [1, 0, 0])
        s, fit, rms = geo.fit_similarity(src, pose.apply(src))
        assert s == pytest.approx(1.0, abs=1e-12)
        assert rms < 1e-12
        assert np.allclose(fit.t, [1, 0, 0], atol=1e-12)
        assert geo.quat_angle(fit.q, pose.q) < 1e-9

    def test_pure_scale(self):
        rng = np.random.default_rng(1)
        src = rng.random((6, 3))
        s, fit, rms = geo.fit_similarity(src, src * 2.0)
        assert s == pytest.approx(2.0, abs=1e-12)
        assert geo.quat_angle(fit.q, [1, 0, 0, 0]) < 1e-10
        assert rms < 1e-12

    def test_noisy_recovery_vs_scalar_oracle(self):
        # oracle: independent scalar re-implementation of the closed form
        rng = np.random.default_rng(7)
        src = rng.random((50, 3))
        q_true = random_rotation(rng)
        pose_true = geo.Pose6D(q_true, rng.random(3))
        sigma = 1e-3
        tgt = pose_true.apply(src) + rng.normal(scale=sigma, size=(50, 3))
        s, fit, rms = geo.fit_similarity(src, tgt)
        assert abs(s - 1.0) < 5e-3
        assert geo.quat_angle(fit.q, q_true) < np.deg2rad(0.5)
        assert np.linalg.norm(fit.t - pose_true.t) < 2e-3
        # rms of 3D residual norms with per-axis noise sigma is sigma*sqrt(3)
        assert rms == pytest.approx(sigma * np.sqrt(3), rel=0.3)

        scale_o, R_o, t_o = _umeyama_scalar_oracle(src, tgt)
        assert abs(scale_o - s) < 1e-12
        assert np.allclose(R_o, fit.R, atol=1e-12)
        assert np.allclose(t_o, fit.t, atol=1e-12)

    def test_noise_free_exact_100_trials(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            src = rng.random((5, 3))
            pose = geo.Pose6D(random_rotation(rng), rng.random(3))
            scale = rng.uniform(0.5, 2.0)
            s, fit, rms = geo.fit_similarity(src, pose.apply(src * scale))
            assert rms < 1e-10

    def test_degenerate(self):
        with pytest.raises(DegenerateConfiguration):
            geo.fit_similarity([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [1, 0, 0]])
        line = np.outer(np.arange(5), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            geo.fit_similarity(line, line)


def _umeyama_scalar_oracle(x, y):
    """Loop-based closed-form similarity fit, kept independent of the library path."""
    n = len(x)
    mx = [sum(p[k] for p in x) / n for k in range(3)]
    my = [sum(p[k] for p in y) / n for k in range(3)]
    cov = np.zeros((3, 3))
    var = 0.0
    for xi, yi in zip(x, y):
        dx = [xi[k] - mx[k] for k in range(3)]
        dy = [yi[k] - my[k] for k in range(3)]
        for a in range(3):
            var += dx[a] * dx[a] / n
            for b in range(3):
                cov[a, b] += dy[a] * dx[b] / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = (d * S.diagonal()).sum() / var
    t = np.array(my) - s * R @ np.array(mx)
    return s, R, t


class TestProjectToSurface:
    def test_vertex_hit(self):
        mesh = geo.make_box()
        bp, closest, dist = geo.project_to_surface(mesh, mesh.vertices[3])
        assert dist < 1e-12
        corner = np.isclose(bp.bary, 1.0, atol=1e-9)
        assert corner.sum() == 1
        assert np.allclose(closest, mesh.vertices[3], atol=1e-12)

    def test_face_centroid_offset_along_normal(self):
        mesh = geo.make_box()
        f = 0
        tri = mesh.triangles[f]
        centroid = tri.mean(axis=0)
        p = centroid + mesh.face_normals[f] * 0.005
        bp, closest, dist = geo.project_to_surface(mesh, p)
        assert dist == pytest.approx(0.005, abs=1e-12)
        assert np.allclose(closest, centroid, atol=1e-12)
        assert np.allclose(bp.position(mesh), closest, atol=1e-9)

    def test_matches_brute_force_scan(self):
        mesh = geo.make_box(extents=(1, 1, 1))
        rng = np.random.default_rng(3)
        for p in rng.uniform(-1, 1, size=(50, 3)):
            bp, closest, dist = geo.project_to_surface(mesh, p)
            best = min(
                np.linalg.norm(_closest_on_tri_oracle(p, mesh.triangles[f]) - p)
                for f in range(len(mesh.faces))
            )
            # exact result can only beat the grid scan, by at most the
            # quadratic error of the grid spacing
            assert dist <= best + 1e-12
            assert best - dist < 1e-4

    def test_distance_lower_bound_property(self):
        mesh = geo.make_icosphere(0.2, 1)
        rng = np.random.default_rng(5)
        for p in rng.uniform(-0.4, 0.4, size=(20, 3)):
            _, _, dist = geo.project_to_surface(mesh, p)
            assert dist <= np.linalg.norm(mesh.vertices - p, axis=1).min() + 1e-12


def _closest_on_tri_oracle(p, tri, steps=200):
    """Dense barycentric grid scan; independent of the region-based code path."""
    best, best_d = None, np.inf
    for i in range(steps + 1):
        for j in range(steps + 1 - i):
            u, v = i / steps, j / steps
            q = (1 - u - v) * tri[0] + u * tri[1] + v * tri[2]
            d = np.linalg.norm(q - p)
            if d < best_d:
                best, best_d = q, d
    return best


class TestSignedDistance:
    def test_sphere_center_and_outside(self):
        mesh = geo.make_icosphere(0.5, 2)
        assert geo.signed_distance(mesh, [0, 0, 0]) == pytest.approx(0.5, abs=0.02)
        assert geo.signed_distance(mesh, [0.6, 0, 0]) == pytest.approx(-0.1, abs=0.005)

    def test_requires_watertight_flag(self):
        tri = geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        with pytest.raises(NotWatertight):
            geo.signed_distance(tri, [0, 0, 1])

    def test_sign_agreement_with_voxel_flood_fill(self):
        mesh = geo.make_box(extents=(0.05, 0.08, 0.04))
        rng = np.random.default_rng(9)
        pts = rng.uniform(-0.06, 0.06, size=(1000, 3))
        inside_pred = geo.signed_distances(mesh, pts) > 0
        inside_true = _flood_fill_inside(mesh, pts, voxel=0.002)
        assert np.array_equal(inside_pred, inside_true)

    def test_single_sign_change_along_ray(self):
        mesh = geo.make_icosphere(0.1, 2)
        ts = np.arange(0.0, 0.25, 0.001)
        pts = np.outer(ts, [1.0, 0.3, 0.2] / np.linalg.norm([1.0, 0.3, 0.2]))
        signs = np.sign(geo.signed_distances(mesh, pts))
        flips = np.nonzero(np.diff(signs) != 0)[0]
        assert len(flips) == 1


def _flood_fill_inside(mesh, queries, voxel):
    """Voxelized flood fill from the boundary; marks non-reachable voxels inside."""
    lo = np.minimum(mesh.vertices.min(axis=0), queries.min(axis=0)) - 4 * voxel
    hi = np.maximum(mesh.vertices.max(axis=0), queries.max(axis=0)) + 4 * voxel
    dims = np.ceil((hi - lo) / voxel).astype(int) + 1
    centers_axes = [lo[k] + voxel * np.arange(dims[k]) for k in range(3)]
    gx, gy, gz = np.meshgrid(*centers_axes, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    # voxels cut by the surface: within half a diagonal of the mesh
    d = geo.unsigned_distances(mesh, centers).reshape(dims)
    solidish = d < voxel * np.sqrt(3) / 2
    blocked = solidish.copy()
    outside = np.zeros(tuple(dims), dtype=bool)
    stack = [(0, 0, 0)]
    outside[0, 0, 0] = True
    while stack:
        i, j, k = stack.pop()
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, k + dk
            if 0 <= a < dims[0] and 0 <= b < dims[1] and 0 <= c < dims[2]:
                if not outside[a, b, c] and not blocked[a, b, c]:
                    outside[a, b, c] = True
                    stack.append((a, b, c))
    idx = np.floor((queries - lo) / voxel + 0.5).astype(int)
    result = np.empty(len(queries), dtype=bool)
    for n, (i, j, k) in enumerate(idx):
        if blocked[i, j, k]:
            # ambiguous shell voxel: fall back to exact winding test
            result[n] = geo.winding_numbers(mesh, queries[n][None])[0] > 0.5
        else:
            result[n] = not outside[i, j, k]
    return result


class TestSampleSurface:
    def test_single_triangle(self):
        tri = geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        ss = geo.sample_surface(tri, 1, seed=42)
        b = ss.bary[0]
        assert b.min() >= 0 and b.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(ss.normals[0], [0, 0, 1])

    def test_octant_counts_binomial(self):
        mesh = geo.make_icosphere(1.0, 3)
        ss = geo.sample_surface(mesh, 10_000, seed=0)
        octant = (
            (ss.points[:, 0] > 0).astype(int) * 4
            + (ss.points[:, 1] > 0).astype(int) * 2
            + (ss.points[:, 2] > 0).astype(int)
        )
        counts = np.bincount(octant, minlength=8)
        n, p = 10_000, 1 / 8
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma)

    def test_determinism(self):
        mesh = geo.make_box()
        a = geo.sample_surface(mesh, 500, seed=7)
        b = geo.sample_surface(mesh, 500, seed=7)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.face_ids, b.face_ids)

    def test_normals_unit(self):
        mesh = geo.make_cylinder()
        ss = geo.sample_surface(mesh, 200, seed=1)
        assert np.allclose(np.linalg.norm(ss.normals, axis=1), 1.0, atol=1e-6)


class TestKnn:
    def test_query_on_sample(self):
        mesh = geo.make_icosphere(0.1, 1)
        ss = geo.sample_surface(mesh, 100, seed=0)
        assert geo.knn(ss.points[7], ss, 1)[0] == 7

    def test_k_equals_n(self):
        mesh = geo.make_box()
        ss = geo.sample_surface(mesh, 30, seed=0)
        idx = geo.knn([0.5, 0.5, 0.5], ss, 30)
        d = np.linalg.norm(ss.points[idx] - [0.5, 0.5, 0.5], axis=1)
        assert np.all(np.diff(d) >= -1e-15)
        assert sorted(idx) == list(range(30))

    def test_matches_full_sort(self):
        mesh = geo.make_icosphere(0.3, 3)
        ss = geo.sample_surface(mesh, 10_000, seed=2)
        rng = np.random.default_rng(4)
        for q in rng.uniform(-0.5, 0.5, size=(100, 3)):
            idx = geo.knn(q, ss, 50)
            d2 = ((ss.points - q) ** 2).sum(axis=1)
            oracle = np.lexsort((np.arange(len(d2)), d2))[:50]
            assert np.array_equal(idx, oracle)


class TestSlerp:
    def test_halfway(self):
        a = geo.Pose6D.identity()
        b = geo.Pose6D(geo.axis_angle_to_quat([0, 0, np.pi / 2]), [1, 0, 0])
        mid = geo.slerp(a, b, 0.5)
        assert geo.quat_angle(mid.q, geo.axis_angle_to_quat([0, 0, np.pi / 4])) < 1e-12
        assert np.allclose(mid.t, [0.5, 0, 0])

    def test_endpoints(self):
        rng = np.random.default_rng(12)
        a = geo.Pose6D(random_rotation(rng), rng.random(3))
        b = geo.Pose6D(random_rotation(rng), rng.random(3))
        assert geo.slerp(a, b, 0.0).angle_to(a) < 1e-12
        assert geo.slerp(a, b, 1.0).angle_to(b) < 1e-12

    def test_constant_angular_velocity_via_log_map(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            a = geo.Pose6D(random_rotation(rng), rng.random(3))
            b = geo.Pose6D(random_rotation(rng), rng.random(3))
            total = a.angle_to(b)
            for u in (0.25, 0.5, 0.75):
                assert geo.slerp(a, b, u).angle_to(a) == pytest.approx(u * total, abs=1e-9)

    @given(st.integers(0, 2**32 - 1), st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_unit_norm(self, seed, u):
        rng = np.random.default_rng(seed)
        a = geo.Pose6D(random_rotation(rng), np.zeros(3))
        b = geo.Pose6D(random_rotation(rng), np.zeros(3))
        assert abs(np.linalg.norm(geo.slerp(a, b, u).q) - 1.0) < 1e-12

    def test_antipodal(self):
        a = geo.Pose6D.identity()
        q = geo.axis_angle_to_quat([0, 0, 0.3])
        b = geo.Pose6D(-np.array(q), np.zeros(3))  # canonicalized back by Pose6D
        mid = geo.slerp(a, b, 0.5)
        assert mid.angle_to(a) == pytest.approx(0.15, abs=1e-9)


class TestObjRoundTrip:
    def test_round_trip(self, tmp_path):
        mesh = geo.make_cylinder(0.02, 0.08, segments=8)
        path = tmp_path / "m.obj"
        geo.save_obj(mesh, path)
        back = geo.load_obj(path)
        assert back.watertight
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-7)
        assert np.array_equal(back.faces, mesh.faces)
