import numpy as np
import pytest

from attnormals import registration as reg
from attnormals.data_io import SyntheticShapeSpec, synth_shape
from attnormals.experiments import estimate_normals, icp_instance
from attnormals.geometry import PointCloud, SpatialIndex, normalize_to_unit_sphere


def random_rigid(rng):
    return reg.make_perturbation(rng.uniform(-30, 30, size=3), rng.normal(scale=0.1, size=3))


def unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def cube():
    cloud, _, _ = normalize_to_unit_sphere(synth_shape(SyntheticShapeSpec("cube", 5000, 0)))
    return cloud


class TestRigidTransform:
    def test_identity_perturbation(self):
        t = reg.make_perturbation((0, 0, 0), (0, 0, 0))
        np.testing.assert_array_equal(t.rotation, np.eye(3))
        np.testing.assert_array_equal(t.translation, 0)

    def test_axis_rotation(self):
        t = reg.make_perturbation((90, 0, 0), (0, 0, 0))
        np.testing.assert_allclose(t.apply([0, 1, 0])[0], [0, 0, 1], atol=1e-15)

    def test_orthonormal(self):
        r = reg.make_perturbation((10, 10, 10), (0.01, 0.01, 0.01)).rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1) < 1e-12

    def test_composition_order(self):
        a = 0.3
        rx = reg.make_perturbation((np.degrees(a), 0, 0), (0, 0, 0)).rotation
        ry = reg.make_perturbation((0, np.degrees(a), 0), (0, 0, 0)).rotation
        rz = reg.make_perturbation((0, 0, np.degrees(a)), (0, 0, 0)).rotation
        full = reg.make_perturbation((np.degrees(a),) * 3, (0, 0, 0)).rotation
        np.testing.assert_allclose(full, rz @ ry @ rx, atol=1e-15)

    def test_inverse_and_compose(self):
        rng = np.random.default_rng(0)
        t = random_rigid(rng)
        both = t.compose(t.inverse())
        np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(both.translation, 0, atol=1e-14)
        p = rng.normal(size=(4, 3))
        u = random_rigid(rng)
        np.testing.assert_allclose(t.compose(u).apply(p), t.apply(u.apply(p)), atol=1e-14)

    def test_matrix(self):
        t = reg.make_perturbation((5, 6, 7), (1, 2, 3))
        p = np.array([0.3, -0.2, 0.9])
        np.testing.assert_allclose((t.matrix() @ np.append(p, 1))[:3], t.apply(p)[0], atol=1e-15)

    def test_orthonormalize_repairs_drift(self):
        r = reg.make_perturbation((10, 20, 30), (0, 0, 0)).rotation + 1e-6
        fixed = reg.orthonormalize(r)
        np.testing.assert_allclose(fixed.T @ fixed, np.eye(3), atol=1e-14)
        assert abs(np.linalg.det(fixed) - 1) < 1e-14


class TestEnergies:
    def test_point_to_point_identical(self):
        p = np.random.default_rng(1).normal(size=(10, 3))
        pairs = np.stack([np.arange(10)] * 2, axis=1)
        assert reg.point_to_point_energy(p, p, pairs) == 0.0

    def test_point_to_point_single_pair(self):
        assert reg.point_to_point_energy([[0, 0, 0]], [[0, 2, 0]], [[0, 0]]) == 4.0

    def test_point_to_point_naive(self):
        rng = np.random.default_rng(2)
        src, dst = rng.normal(size=(100, 3)), rng.normal(size=(120, 3))
        pairs = np.stack([np.arange(100), rng.integers(0, 120, 100)], axis=1)
        naive = sum(float(np.sum((src[i] - dst[j]) ** 2)) for i, j in pairs)
        assert abs(reg.point_to_point_energy(src, dst, pairs) - naive) < 1e-12

    def test_empty_pairs(self):
        with pytest.raises(ValueError):
            reg.point_to_point_energy(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            reg.point_to_plane_energy(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), [])

    def test_plane_true_transform_zero(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(50, 3))
        t = random_rigid(rng)
        pairs = np.stack([np.arange(50)] * 2, axis=1)
        assert reg.point_to_plane_energy(src, t.apply(src), unit_rows(rng, 50), pairs, t) < 1e-28

    def test_plane_ignores_tangential_slide(self):
        n = np.array([[0.0, 0.0, 1.0]])
        assert reg.point_to_plane_energy([[0.4, -0.3, 0.0]], [[0.0, 0.0, 0.0]], n, [[0, 0]]) == 0.0

    def test_plane_naive(self):
        rng = np.random.default_rng(4)
        src, dst, n = rng.normal(size=(80, 3)), rng.normal(size=(90, 3)), unit_rows(rng, 90)
        pairs = np.stack([np.arange(80), rng.integers(0, 90, 80)], axis=1)
        t = random_rigid(rng)
        naive = sum(float(n[j] @ (t.rotation @ src[i] + t.translation - dst[j])) ** 2 for i, j in pairs)
        assert abs(reg.point_to_plane_energy(src, dst, n, pairs, t) - naive) < 1e-12

    def test_plane_below_point_energy(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            src, dst, n = rng.normal(size=(30, 3)), rng.normal(size=(30, 3)), unit_rows(rng, 30)
            pairs = np.stack([np.arange(30), rng.integers(0, 30, 30)], axis=1)
            assert reg.point_to_plane_energy(src, dst, n, pairs) <= reg.point_to_point_energy(src, dst, pairs)


class TestCorrespondences:
    def test_identical(self):
        p = np.random.default_rng(6).normal(size=(200, 3))
        pairs = reg.find_correspondences(p, SpatialIndex(p))
        np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])

    def test_small_shift(self):
        g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        pairs = reg.find_correspondences(g + 0.3 * np.array([1, 1, 1]) / np.sqrt(3), SpatialIndex(g))
        np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])

    def test_brute_force(self):
        rng = np.random.default_rng(7)
        src, dst = rng.normal(size=(100, 3)), rng.normal(size=(150, 3))
        pairs = reg.find_correspondences(src, SpatialIndex(dst))
        brute = np.argmin(((src[:, None] - dst[None]) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(pairs[:, 1], brute)


class TestLmStep:
    def test_zero_residuals(self):
        p = np.random.default_rng(8).normal(size=(20, 3))
        pairs = np.stack([np.arange(20)] * 2, axis=1)
        delta, _, accepted = reg.lm_solve_step(p, p, unit_rows(np.random.default_rng(9), 20), pairs,
                                               reg.RigidTransform.identity(), 1e-4)
        assert accepted
        np.testing.assert_array_equal(delta, 0)

    def test_planar_normal_offset(self):
        rng = np.random.default_rng(10)
        dst = np.column_stack([rng.uniform(-1, 1, size=(100, 2)), np.zeros(100)])
        src = dst + [0.0, 0.0, 0.05]
        n = np.tile([0.0, 0.0, 1.0], (100, 1))
        pairs = np.stack([np.arange(100)] * 2, axis=1)
        delta, _, accepted = reg.lm_solve_step(src, dst, n, pairs, reg.RigidTransform.identity(), 1e-12)
        assert accepted
        assert abs(delta[5] + 0.05) < 1e-8

    def test_jacobian_finite_differences(self):
        rng = np.random.default_rng(11)
        src, dst, n = rng.normal(size=(40, 3)), rng.normal(size=(40, 3)), unit_rows(rng, 40)
        pairs = np.stack([np.arange(40), rng.permutation(40)], axis=1)
        t = random_rigid(rng)
        jac = reg.plane_jacobian(src, dst, n, pairs, t)
        eps = 1e-6
        worst = 0.0
        for j in range(6):
            step = np.zeros(6)
            step[j] = eps
            plus = reg.plane_residuals(src, dst, n, pairs, reg.apply_increment(t, step))
            minus = reg.plane_residuals(src, dst, n, pairs, reg.apply_increment(t, -step))
            num = (plus - minus) / (2 * eps)
            worst = max(worst, np.max(np.abs(num - jac[:, j]) / np.maximum(np.maximum(np.abs(num), np.abs(jac[:, j])), 1e-8)))
        assert worst < 1e-5

    def test_accepted_steps_decrease(self):
        rng = np.random.default_rng(12)
        src = rng.normal(size=(60, 3))
        dst, n = random_rigid(rng).apply(src), unit_rows(rng, 60)
        pairs = np.stack([np.arange(60)] * 2, axis=1)
        t, lam = reg.RigidTransform.identity(), 1e-4
        energy = reg.point_to_plane_energy(src, dst, n, pairs, t)
        for _ in range(20):
            delta, lam, accepted = reg.lm_solve_step(src, dst, n, pairs, t, lam)
            if not accepted:
                break
            t = reg.apply_increment(t, delta)
            new = reg.point_to_plane_energy(src, dst, n, pairs, t)
            assert new < energy or new == 0.0
            energy = new

    def test_too_few_pairs(self):
        with pytest.raises(ValueError):
            reg.lm_solve_step(np.ones((5, 3)), np.zeros((5, 3)), unit_rows(np.random.default_rng(0), 5),
                              np.stack([np.arange(5)] * 2, axis=1), reg.RigidTransform.identity(), 1e-4)

    def test_stalled(self):
        # squared lever arms overflow, so the normal equations cannot be formed
        p = np.random.default_rng(13).normal(size=(10, 3)) * [1e155, 1e155, 1.0]
        pairs = np.stack([np.arange(10)] * 2, axis=1)
        n = np.tile([0.0, 0.0, 1.0], (10, 1))
        with pytest.raises(RuntimeError, match="solver stalled"):
            reg.lm_solve_step(p + [0, 0, 1.0], p, n, pairs, reg.RigidTransform.identity(), 1e-4)

    def test_non_finite_energy(self):
        p = np.ones((6, 3))
        n = np.full((6, 3), np.nan)
        with pytest.raises(ValueError):
            reg.lm_solve_step(p, p, n, np.stack([np.arange(6)] * 2, axis=1), reg.RigidTransform.identity(), 1e-4)


class TestIcp:
    def test_identical_clouds(self, cube):
        result = reg.icp(cube.points, cube.points, cube.normals)
        assert result.converged and result.iterations <= 1
        assert result.ptpt_trace[-1] == 0.0

    def test_cube_protocol_gt_normals(self, cube):
        src, dst, truth = icp_instance(cube)
        result = reg.icp(src.points, dst.points, dst.normals)
        assert result.converged and result.iterations <= 50
        assert result.ptpt_trace[-1] < 1e-5
        np.testing.assert_allclose(result.transform.rotation, truth.rotation, atol=1e-4)
        np.testing.assert_allclose(result.transform.translation, truth.translation, atol=1e-4)
        r = result.transform.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)

    def test_cube_protocol_pca_normals(self, cube):
        src, dst, _ = icp_instance(cube)
        result = reg.icp(src.points, dst.points, estimate_normals(dst, "pca", 8))
        assert result.converged

    def test_traces_monotone_within_outer_iterations(self, cube):
        src, dst, _ = icp_instance(cube)
        result = reg.icp(src.points, dst.points, dst.normals)
        for energies in result.lm_energies:
            assert np.all(np.diff(energies) <= 0)
        assert len(result.ptpt_trace) == len(result.ptplane_trace) == result.iterations

    def test_normal_sign_irrelevant(self, cube):
        src, dst, _ = icp_instance(cube)
        signs = np.where(np.random.default_rng(14).random(len(dst)) < 0.5, -1.0, 1.0)[:, None]
        a = reg.icp(src.points, dst.points, dst.normals)
        b = reg.icp(src.points, dst.points, dst.normals * signs)
        assert a.iterations == b.iterations
        np.testing.assert_allclose(a.ptplane_trace, b.ptplane_trace, rtol=1e-12, atol=1e-20)
        np.testing.assert_allclose(a.transform.matrix(), b.transform.matrix(), atol=1e-12)

    def test_failure_label(self, cube):
        src, dst, _ = icp_instance(cube)
        result = reg.icp(src.points, dst.points, dst.normals, reg.IcpConfig(max_iterations=1))
        assert not result.converged and result.label == "F"

    def test_input_errors(self):
        with pytest.raises(ValueError):
            reg.icp(np.zeros((0, 3)), np.zeros((3, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            reg.icp(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            reg.IcpConfig(stop_threshold=0)
        with pytest.raises(ValueError):
            reg.IcpConfig(max_iterations=0)

    def test_trace_csv(self, cube, tmp_path):
        src, dst, _ = icp_instance(cube)
        result = reg.icp(src.points, dst.points, dst.normals)
        reg.write_trace_csv(tmp_path / "t.csv", result)
        rows = (tmp_path / "t.csv").read_text().splitlines()
        assert rows[0] == "iteration,e_ptpt,e_ptplane,damping"
        assert len(rows) == result.iterations + 1
        assert float(rows[-1].split(",")[1]) == result.ptpt_trace[-1]

    def test_point_cloud_inputs(self, cube):
        result = reg.icp(PointCloud(cube.points), PointCloud(cube.points), cube.normals)
        assert result.converged
