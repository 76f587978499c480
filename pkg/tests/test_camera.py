import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volcap.camera import (
    Camera,
    Intrinsics,
    Pose,
    backproject_pixel,
    camera_to_world,
    load_rig,
    look_at,
    matrix_to_quat,
    orthonormalize,
    project_point,
    projection_jacobian,
    quat_to_matrix,
    save_rig,
    world_to_camera,
)
from volcap.errors import InvalidGeometryError, InvalidInputError, MalformedFileError

from conftest import random_rotation


class TestBackproject:
    def test_principal_point_ray(self, basic_intrinsics):
        p = backproject_pixel(320.0, 240.0, 2.0, basic_intrinsics)
        assert np.allclose(p, [0.0, 0.0, 2.0])

    def test_unit_offset(self, basic_intrinsics):
        p = backproject_pixel(320.0 + 600.0, 240.0, 1.0, basic_intrinsics)
        assert np.allclose(p, [1.0, 0.0, 1.0])

    def test_matches_formula_oracle(self, basic_intrinsics, rng):
        K = basic_intrinsics
        for _ in range(50):
            u = rng.uniform(0, K.width - 1)
            v = rng.uniform(0, K.height - 1)
            d = rng.uniform(0.1, 10.0)
            expected = np.array([(u - 320.0) / 600.0 * d, (v - 240.0) / 600.0 * d, d])
            assert np.allclose(backproject_pixel(u, v, d, K), expected, atol=1e-12)

    def test_nonpositive_depth_rejected(self, basic_intrinsics):
        with pytest.raises(InvalidInputError):
            backproject_pixel(10.0, 10.0, 0.0, basic_intrinsics)
        with pytest.raises(InvalidInputError):
            backproject_pixel(10.0, 10.0, -1.0, basic_intrinsics)


class TestCameraToWorld:
    def test_identity(self):
        assert np.allclose(camera_to_world([1.0, 2.0, 3.0], Pose.identity()), [1, 2, 3])

    def test_pure_translation(self):
        pose = Pose(np.eye(3), [0.0, 0.0, 5.0])
        assert np.allclose(camera_to_world([0.0, 0.0, 0.0], pose), [0, 0, 5])

    def test_yaw_matches_matrix_product(self):
        c, s = np.cos(np.pi / 2), np.sin(np.pi / 2)
        R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        pose = Pose(R, [0.0, 0.0, 0.0])
        expected = R @ np.array([1.0, 0.0, 0.0])
        assert np.allclose(camera_to_world([1.0, 0.0, 0.0], pose), expected, atol=1e-12)

    def test_world_to_camera_inverts(self, rng):
        for _ in range(20):
            pose = Pose(random_rotation(rng), rng.normal(size=3))
            p = rng.normal(size=3)
            assert np.allclose(world_to_camera(camera_to_world(p, pose), pose), p, atol=1e-12)


class TestProject:
    def test_round_trip(self, identity_camera):
        u, v, d = 100.5, 200.25, 1.7
        p = camera_to_world(backproject_pixel(u, v, d, identity_camera.intrinsics), identity_camera.pose)
        uu, vv, dd = project_point(p, identity_camera)
        assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9 and abs(dd - d) < 1e-9

    def test_on_axis_hits_principal_point(self, identity_camera):
        u, v, z = project_point([0.0, 0.0, 3.0], identity_camera)
        assert np.allclose([u, v, z], [320.0, 240.0, 3.0])

    def test_off_axis_matches_pinhole_oracle(self, rng):
        K = Intrinsics(525.0, 530.0, 310.0, 250.0, 640, 480)
        pose = Pose(random_rotation(rng), rng.normal(size=3))
        cam = Camera("c", K, pose)
        for _ in range(30):
            p_cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5.0)])
            p_world = pose.R @ p_cam + pose.t
            u, v, z = project_point(p_world, cam)
            assert abs(u - (525.0 * p_cam[0] / p_cam[2] + 310.0)) < 1e-9
            assert abs(v - (530.0 * p_cam[1] / p_cam[2] + 250.0)) < 1e-9
            assert abs(z - p_cam[2]) < 1e-9

    def test_behind_camera_rejected(self, identity_camera):
        with pytest.raises(InvalidGeometryError):
            project_point([0.0, 0.0, -1.0], identity_camera)

    def test_identity_over_pixel_grid(self, identity_camera):
        K = identity_camera.intrinsics
        for u in np.linspace(0, K.width - 1, 9):
            for v in np.linspace(0, K.height - 1, 7):
                for d in (0.11, 1.0, 10.0):
                    p = camera_to_world(backproject_pixel(u, v, d, K), identity_camera.pose)
                    uu, vv, dd = project_point(p, identity_camera)
                    assert max(abs(uu - u), abs(vv - v), abs(dd - d)) < 1e-9


class TestJacobian:
    def test_on_axis(self):
        K = Intrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
        J = projection_jacobian([0.0, 0.0, 2.0], K)
        assert np.allclose(J, [[300.0, 0.0, 0.0], [0.0, 300.0, 0.0]])

    def test_mirror_symmetry(self, basic_intrinsics):
        J1 = projection_jacobian([0.3, -0.2, 2.0], basic_intrinsics)
        J2 = projection_jacobian([-0.3, 0.2, 2.0], basic_intrinsics)
        assert np.allclose(J1[:, :2], J2[:, :2])
        assert np.allclose(J1[:, 2], -J2[:, 2])

    def test_matches_finite_differences(self, rng, identity_camera):
        K = identity_camera.intrinsics
        for _ in range(25):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5.0)])
            J = projection_jacobian(p, K)
            step = 1e-6 * p[2]
            J_fd = np.zeros((2, 3))
            for a in range(3):
                dp = np.zeros(3)
                dp[a] = step
                up, vp, _ = project_point(p + dp, identity_camera)
                um, vm, _ = project_point(p - dp, identity_camera)
                J_fd[:, a] = [(up - um) / (2 * step), (vp - vm) / (2 * step)]
            rel = np.abs(J - J_fd) / (np.abs(J_fd) + 1e-9)
            assert rel.max() < 1e-5

    def test_behind_rejected(self, basic_intrinsics):
        with pytest.raises(InvalidGeometryError):
            projection_jacobian([0.0, 0.0, -0.5], basic_intrinsics)


class TestPose:
    def test_orthonormality_preserved_over_long_chains(self, rng):
        pose = Pose.identity()
        step = Pose(random_rotation(rng), rng.normal(size=3) * 0.01)
        for _ in range(10_000):
            pose = pose.compose(step)
        assert np.max(np.abs(pose.R.T @ pose.R - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(pose.R) - 1.0) < 1e-9

    def test_inverse(self, rng):
        pose = Pose(random_rotation(rng), rng.normal(size=3))
        round_trip = pose.compose(pose.inverse())
        assert np.allclose(round_trip.R, np.eye(3), atol=1e-12)
        assert np.allclose(round_trip.t, 0.0, atol=1e-12)

    def test_bad_rotation_rejected(self):
        with pytest.raises(InvalidInputError):
            Pose(np.eye(3) * 1.001, np.zeros(3))
        with pytest.raises(InvalidInputError):
            Pose(-np.eye(3), np.zeros(3))  # det -1


class TestQuaternions:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
    def test_matrix_round_trip(self, comps):
        q = np.asarray(comps)
        n = np.linalg.norm(q)
        if n < 1e-3:
            return
        q = q / n
        R = quat_to_matrix(q)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        q2 = matrix_to_quat(R)
        # q and -q encode the same rotation
        assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-9

    def test_known_rotation(self):
        R = quat_to_matrix([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])  # 90 deg about z
        assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


class TestRigFile:
    def test_round_trip(self, tmp_path, rng):
        cams = []
        for i in range(4):
            K = Intrinsics(600.0 + i, 610.0, 320.25, 240.5, 640, 480)
            cams.append(Camera(f"cam{i:02d}", K, Pose(random_rotation(rng), rng.normal(size=3))))
        path = tmp_path / "rig.txt"
        save_rig(path, cams)
        loaded = load_rig(path)
        assert [c.id for c in loaded] == [c.id for c in cams]
        for a, b in zip(cams, loaded):
            assert np.allclose(a.pose.R, b.pose.R, atol=1e-12)
            assert np.allclose(a.pose.t, b.pose.t, atol=1e-12)
            assert a.intrinsics == b.intrinsics

    def test_comments_and_newlines(self, tmp_path):
        text = "# a rig\ncam00 600 600 320 240 640 480\n# pose\n1 0 0 0.5\n0 1 0 0\n0 0 1 0\n"
        p = tmp_path / "rig.txt"
        p.write_text(text)
        cams = load_rig(p)
        assert len(cams) == 1
        assert np.allclose(cams[0].pose.t, [0.5, 0.0, 0.0])

    def test_malformed_rejected(self, tmp_path):
        p = tmp_path / "rig.txt"
        p.write_text("cam00 600 600 320 240 640\n")
        with pytest.raises(MalformedFileError):
            load_rig(p)
        p.write_text(
            "cam00 600 600 320 240 640 480 1 0 0 0 0 1 0 0 0 0 1 0\n"
            "cam00 600 600 320 240 640 480 1 0 0 0 0 1 0 0 0 0 1 0\n"
        )
        with pytest.raises(MalformedFileError):
            load_rig(p)


class TestLookAt:
    def test_faces_target(self):
        pose = look_at([0.0, 0.0, -2.5], [0.0, 0.0, 0.0])
        fwd = pose.R[:, 2]
        assert np.allclose(fwd, [0.0, 0.0, 1.0], atol=1e-12)
        cam = Camera("v", Intrinsics(600, 600, 320, 240, 640, 480), pose)
        u, v, z = project_point([0.0, 0.0, 0.0], cam)
        assert np.allclose([u, v, z], [320.0, 240.0, 2.5], atol=1e-9)

    def test_orthonormal(self, rng):
        for _ in range(20):
            eye = rng.normal(size=3) * 3
            target = rng.normal(size=3)
            if np.linalg.norm(eye - target) < 1e-3:
                continue
            R = look_at(eye, target).R
            assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9


def test_orthonormalize_restores_drift(rng):
    R = random_rotation(rng) + rng.normal(0, 1e-4, (3, 3))
    R2 = orthonormalize(R)
    assert np.max(np.abs(R2.T @ R2 - np.eye(3))) < 1e-12
    assert abs(np.linalg.det(R2) - 1.0) < 1e-12
