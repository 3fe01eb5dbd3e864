import json
import struct

import numpy as np
import pytest

from anchormvs.geometry import GeometryError, Intrinsics, Pose, backproject, project
from anchormvs.pfm import PFMError, read_pfm, write_pfm
from anchormvs.prompt import PromptCorruption
from anchormvs.synthdata import (
    Box, Plane, SceneSpec, Sphere, Texture, cast, default_scene, load_sequence, plane_scene,
    primitive_from_dict, primitive_to_dict, render, save_sequence, source_indices, trajectory,
    value_noise,
)


K = Intrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)


def test_fronto_parallel_plane_has_constant_depth():
    depth, color, hit = cast([Plane((0, 0, 5.0), (0, 0, -1.0))], K, Pose.identity())
    assert hit.all()
    np.testing.assert_allclose(depth, 5.0, atol=1e-12)
    assert color.min() >= 0 and color.max() <= 1


def test_tilted_plane_depth_matches_analytic():
    # plane y = 1 under the camera: z = fy / (v + 0.5 - cy) for rows below the horizon
    depth, _, hit = cast([Plane((0, 1.0, 0), (0, -1.0, 0))], K, Pose.identity())
    v = np.arange(24) + 0.5 - K.cy
    rows = v > 0
    expected = K.fy / v[rows]
    np.testing.assert_allclose(depth[rows], np.broadcast_to(expected[:, None], (rows.sum(), 32)), rtol=1e-12)
    assert not hit[~rows].any()


def test_sphere_depth_symmetric_and_closest_at_center():
    s = Sphere((0, 0, 6.0), 1.5)
    K2 = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
    depth, _, hit = cast([s], K2, Pose.identity())
    np.testing.assert_allclose(depth, depth[::-1, :], atol=1e-12)
    np.testing.assert_allclose(depth, depth[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(depth, depth.T, atol=1e-12)
    assert abs(depth[hit].min() - 4.5) < 0.01
    assert hit[16, 16] and not hit[0, 0]


def test_nearest_hit_wins():
    near = Box((0, 0, 4.0), (0.5, 0.5, 0.5))
    far = Plane((0, 0, 9.0), (0, 0, -1.0))
    depth, _, _ = cast([far, near], K, Pose.identity())
    assert abs(depth[12, 16] - 3.5) < 1e-12
    assert abs(depth[0, 0] - 9.0) < 1e-12


def test_render_warp_consistency():
    bundles = render(default_scene(64, 48, frames=2, seed=1))
    b = bundles[0]
    src, src_depth = b.sources[0], b.source_depths[0]
    K_ = b.reference.intrinsics
    errs = []
    rng = np.random.default_rng(0)
    ys, xs = np.nonzero(b.depth.valid)
    for i in rng.choice(len(ys), 200, replace=False):
        u, v = xs[i] + 0.5, ys[i] + 0.5
        X = backproject((u, v), b.depth.values[ys[i], xs[i]], b.reference)
        uq, vq, z, ok = project(X, src)
        qi, qj = int(vq), int(uq)
        # compare only where the hit point lands on a pixel center, up to sampling
        if ok and src_depth.valid[qi, qj] and abs(uq - (qj + 0.5)) < 0.02 and abs(vq - (qi + 0.5)) < 0.02:
            X2 = backproject((qj + 0.5, qi + 0.5), src_depth.values[qi, qj], src)
            errs.append(np.linalg.norm(X2 - X))
    assert 0 < len(errs)
    # nearly identical rays hit the same smooth surface
    assert np.median(errs) < 0.05
    assert K_.width == 64


def test_exact_reprojection_on_plane():
    spec = plane_scene(32, 24, depth=6.0, frames=2, baseline=0.5)
    b = render(spec)[0]
    src_depth = b.source_depths[0]
    # ray-cast plane depth equals the geometric reprojection to 1e-9
    for (i, j) in [(3, 4), (12, 16), (20, 30)]:
        X = backproject((j + 0.5, i + 0.5), b.depth.values[i, j], b.reference)
        _, _, z, ok = project(X, b.sources[0])
        assert ok and abs(z - 6.0) < 1e-9
    np.testing.assert_allclose(src_depth.values, 6.0, atol=1e-12)


def test_render_is_deterministic_and_jobs_invariant():
    spec = default_scene(32, 24, frames=3, seed=2, corruption=PromptCorruption(beams=8, radial_noise_sigma=0.01))
    a, b = render(spec), render(spec, jobs=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.reference.image, y.reference.image)
        np.testing.assert_array_equal(x.depth.values, y.depth.values)
        np.testing.assert_array_equal(x.prompt.depth, y.prompt.depth)


def test_errors():
    with pytest.raises(ValueError):
        render(SceneSpec([], K, [Pose.identity()]))
    with pytest.raises(GeometryError):
        render(SceneSpec([Plane((0, 0, 0.5), (0, 0, -1.0))], K, [Pose.identity()]))
    with pytest.raises(ValueError, match="texture"):
        flat = Plane((0, 0, 5.0), (0, 0, -1.0), Texture(0, 1.0, 1, (0.0, 0.0, 0.0)))
        render(SceneSpec([flat], K, [Pose.identity()]))


class TestTrajectory:
    def test_translate_step(self):
        poses = trajectory("translate", 6, step=0.37, direction=(1, 2, 2))
        d = [np.linalg.norm(b.translation - a.translation) for a, b in zip(poses, poses[1:])]
        np.testing.assert_allclose(d, 0.37, atol=1e-15)

    def test_static(self):
        poses = trajectory("static", 3, start=(1, 2, 3))
        assert all(np.array_equal(p.translation, poses[0].translation) for p in poses)

    def test_low_parallax(self):
        poses = trajectory("low_parallax", 5, epsilon=1e-3)
        assert np.linalg.norm(poses[-1].translation - poses[0].translation) < 1e-3

    def test_orbit_looks_at_target(self):
        poses = trajectory("orbit", 8, target=(0, 0, 6.0), radius=3.0)
        for p in poses:
            fwd = p.rotation[:, 2]
            to_target = np.array([0, 0, 6.0]) - p.translation
            np.testing.assert_allclose(fwd, to_target / np.linalg.norm(to_target), atol=1e-12)
            assert abs(np.linalg.norm(to_target) - 3.0) < 1e-12

    def test_unknown(self):
        with pytest.raises(ValueError):
            trajectory("spiral", 3)


def test_source_indices_order():
    assert source_indices(2, 5, 4) == [1, 3, 0, 4]
    assert source_indices(0, 4, 2) == [1, 2]
    assert source_indices(0, 1, 2) == []


def test_value_noise_range_and_determinism():
    pts = np.random.default_rng(0).uniform(-5, 5, (1000, 3))
    a = value_noise(pts, 2.0, 7)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, value_noise(pts, 2.0, 7))
    assert not np.array_equal(a, value_noise(pts, 2.0, 8))


def test_primitive_dict_round_trip():
    for p in (Plane((0, 1, 2), (0, 0, -1), Texture(3, 1.5, 2, (0.5, 0.6, 0.7)), (1.0, 2.0)),
              Sphere((1, 2, 3), 0.5), Box((0, 0, 4), (1, 1, 1), 0.3)):
        d = json.loads(json.dumps(primitive_to_dict(p)))
        assert primitive_from_dict(d) == p


def test_sequence_round_trip(tmp_path):
    spec = default_scene(32, 24, frames=3, corruption=PromptCorruption(beams=8, radial_noise_sigma=0.02))
    bundles = render(spec)
    save_sequence(bundles, tmp_path / "seq", spec)
    loaded = load_sequence(tmp_path / "seq")
    assert len(loaded) == len(bundles)
    for a, b in zip(bundles, loaded):
        assert a.source_ids == b.source_ids and a.index == b.index
        np.testing.assert_array_equal(a.reference.image, b.reference.image)
        np.testing.assert_array_equal(a.depth.values.astype(np.float32), b.depth.values)
        np.testing.assert_array_equal(a.prompt.mask, b.prompt.mask)
        np.testing.assert_array_equal(a.prompt.depth.astype(np.float32), b.prompt.depth)
        np.testing.assert_array_equal(a.reference.pose.rotation, b.reference.pose.rotation)
        np.testing.assert_array_equal(a.reference.pose.translation, b.reference.pose.translation)
        assert a.reference.intrinsics == b.reference.intrinsics
        for sa, sb in zip(a.sources, b.sources):
            np.testing.assert_array_equal(sa.image, sb.image)


def test_missing_camera_file_is_named(tmp_path):
    spec = default_scene(32, 24, frames=2)
    save_sequence(render(spec), tmp_path, spec)
    (tmp_path / "frame_0001" / "camera.json").unlink()
    with pytest.raises(FileNotFoundError, match="frame_0001.camera.json"):
        load_sequence(tmp_path)


def test_malformed_metadata_reports_offset(tmp_path):
    (tmp_path / "seq.json").write_text('{"frames": [}')
    with pytest.raises(ValueError, match="byte offset 12"):
        load_sequence(tmp_path)


class TestPFM:
    def test_hand_written_little_endian(self, tmp_path):
        # 2x2 single channel, rows stored bottom to top
        payload = struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)
        (tmp_path / "a.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + payload)
        np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_written_big_endian(self, tmp_path):
        payload = struct.pack(">2f", 0.5, -7.25)
        (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + payload)
        np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), [[0.5, -7.25]])

    def test_writer_bytes(self, tmp_path):
        write_pfm(tmp_path / "c.pfm", np.array([[1.0, 2.0], [3.0, 4.0]]))
        raw = (tmp_path / "c.pfm").read_bytes()
        assert raw == b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)

    def test_color_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).random((3, 5, 3)).astype(np.float32)
        write_pfm(tmp_path / "d.pfm", arr)
        np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), arr)

    @pytest.mark.parametrize("data, offset", [
        (b"P5\n2 2\n-1.0\n", "byte offset 0"),
        (b"Pf\n2 x\n-1.0\n", "byte offset 3"),
        (b"Pf\n2 2\n-1.0\n\x00\x00", "byte offset 14"),
        (b"Pf\n2", "byte offset 4"),
    ])
    def test_malformed(self, tmp_path, data, offset):
        (tmp_path / "e.pfm").write_bytes(data)
        with pytest.raises(PFMError, match=offset):
            read_pfm(tmp_path / "e.pfm")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.pfm"):
            read_pfm(tmp_path / "nope.pfm")
