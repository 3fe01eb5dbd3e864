
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchormvs.geometry import (
    CameraView, DepthHypothesisSet, GeometryError, Intrinsics, Pose, backproject, camera_ray,
    make_hypotheses, project, random_pose, read_cameras, relative_pose, write_cameras,
)

K = Intrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
IDENT = (K, Pose.identity())


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        Intrinsics(-1.0, 1.0, 5, 5, 10, 10)
    with pytest.raises(GeometryError):
        Intrinsics(1.0, 1.0, 10.0, 5, 10, 10)


def test_camera_view_checks_image_dims():
    with pytest.raises(GeometryError, match="does not match"):
        CameraView(K, Pose.identity(), np.zeros((10, 10, 3)))


class TestBackproject:
    def test_principal_point(self):
        np.testing.assert_allclose(backproject([64.0, 48.0], 7.5, IDENT), [0.0, 0.0, 7.5])

    def test_unit_tangent(self):
        np.testing.assert_allclose(backproject([164.0, 48.0], 1.0, IDENT), [1.0, 0.0, 1.0])

    def test_non_positive_depth_rejected(self):
        with pytest.raises(GeometryError):
            backproject([10.0, 10.0], 0.0, IDENT)

    def test_round_trip_1000_random_samples(self):
        rng = np.random.default_rng(0)
        errs = []
        for _ in range(1000):
            pose = random_pose(rng)
            px = rng.uniform([0, 0], [K.width, K.height])
            d = rng.uniform(0.1, 100.0)
            X = backproject(px, d, (K, pose))
            u, v, z, valid = project(X, (K, pose))
            assert valid
            errs.append(max(abs(u - px[0]), abs(v - px[1])))
            assert abs(z - d) <= 1e-9 * d
        assert max(errs) < 1e-9


class TestProject:
    def test_behind_camera_invalid(self):
        *_, valid = project([0.0, 0.0, -1.0], IDENT)
        assert not valid

    def test_principal_ray(self):
        u, v, z, valid = project([0.0, 0.0, 4.0], IDENT)
        assert (u, v, z, bool(valid)) == (64.0, 48.0, 4.0, True)

    def test_outside_image_invalid(self):
        *_, valid = project([10.0, 0.0, 1.0], IDENT)
        assert not valid

    def test_disparity_under_x_translation(self):
        # Second camera displaced by b along +x sees the point shifted by fx*b/d.
        fx, b, d = 100.0, 0.5, 10.0
        X = backproject([64.0, 48.0], d, IDENT)
        u2, *_ = project(X, (K, Pose(np.eye(3), [b, 0.0, 0.0])))
        expected = 64.0 - fx * b / d
        assert abs(u2 - expected) < 1e-12
        assert abs((64.0 - u2) - 5.0) < 1e-12


class TestCameraRay:
    def test_principal_point_identity(self):
        o, d = camera_ray([64.0, 48.0], IDENT)
        np.testing.assert_array_equal(o, 0.0)
        np.testing.assert_allclose(d, [0.0, 0.0, 1.0])

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_unit_and_colinear_with_backproject(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        px = rng.uniform([0, 0], [K.width, K.height])
        o, d = camera_ray(px, (K, pose))
        assert abs(np.linalg.norm(d) - 1.0) < 1e-12
        np.testing.assert_array_equal(o, pose.translation)
        for depth in rng.uniform(0.1, 50.0, 3):
            X = backproject(px, depth, (K, pose))
            s = np.dot(X - o, d)
            assert s > 0
            assert np.abs(o + s * d - X).max() < 1e-9


class TestRelativePose:
    def test_self_is_identity(self):
        p = random_pose(np.random.default_rng(1))
        assert relative_pose(p, p).allclose(Pose.identity())

    def test_translation_only(self):
        t = np.array([0.3, -1.0, 2.0])
        rel = relative_pose(Pose.identity(), Pose(np.eye(3), t))
        np.testing.assert_allclose(rel.translation, -t)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_world_composition(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_pose(rng), random_pose(rng)
        pts = rng.standard_normal((10, 3)) * 5
        via_world = b.inverse().apply(a.apply(pts))
        np.testing.assert_allclose(relative_pose(a, b).apply(pts), via_world, atol=1e-9)
        assert relative_pose(a, b).compose(relative_pose(b, a)).allclose(Pose.identity())

    def test_orthonormality_preserved(self):
        rng = np.random.default_rng(3)
        p = Pose.identity()
        for _ in range(200):
            p = p.compose(random_pose(rng))
        p.check(1e-9)


class TestHypotheses:
    def test_powers_of_two(self):
        h = make_hypotheses(1.0, 64.0, 7)
        np.testing.assert_allclose(h.values, [1, 2, 4, 8, 16, 32, 64], rtol=1e-14)

    def test_endpoints(self):
        h = make_hypotheses(0.5, 80.0, 2)
        assert h.values.tolist() == [0.5, 80.0]

    def test_constant_ratio(self):
        h = make_hypotheses(1.0, 100.0, 64)
        ratio = 100.0 ** (1 / 63)
        assert abs(h.values[32] / h.values[31] - ratio) < 1e-12
        np.testing.assert_allclose(h.values[1:] / h.values[:-1], ratio, rtol=1e-12)

    @pytest.mark.parametrize("args", [(2.0, 1.0, 8), (1.0, 1.0, 8), (0.0, 1.0, 8), (1.0, 2.0, 1)])
    def test_invalid(self, args):
        with pytest.raises(GeometryError):
            make_hypotheses(*args)

    @given(st.floats(0.01, 10), st.floats(1.001, 1000), st.integers(2, 200))
    @settings(max_examples=100, deadline=None)
    def test_monotone_with_exact_endpoints(self, d_min, factor, count):
        h = make_hypotheses(d_min, d_min * factor, count)
        assert isinstance(h, DepthHypothesisSet)
        assert np.all(np.diff(h.values) > 0)
        assert h.values[0] == d_min and h.values[-1] == d_min * factor


def test_camera_file_round_trip(tmp_path):
    pose = random_pose(np.random.default_rng(4))
    write_cameras(tmp_path / "c.json", [(K, pose), (K, Pose.identity())])
    back = read_cameras(tmp_path / "c.json")
    assert back[0][0] == K and back[0][1] == pose and back[1][1] == Pose.identity()
    with pytest.raises(FileNotFoundError, match="missing.json"):
        read_cameras(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"fx": 1,')
    with pytest.raises(GeometryError, match="byte offset"):
        read_cameras(tmp_path / "bad.json")
