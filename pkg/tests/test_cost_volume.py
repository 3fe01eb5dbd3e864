import numpy as np
import pytest

from anchormvs.autodiff import ParamStore, grad_check, mlp, ops
from anchormvs.cost_volume import (
    META_DIM, SENTINEL, CostVolumeConfig, absolute_inputs, anchor_costs, build_absolute_costs,
    build_cost_volume, build_relative_metadata, dump_cost_volume, extract_features,
    load_cost_volume_dump, photometric_features, sweep_geometry, sweep_scores,
)
from anchormvs.geometry import CameraView, GeometryError, Intrinsics, Pose, make_hypotheses
from anchormvs.prompt import SparsePrompt, downsample_nearest_valid
from anchormvs.synthdata import default_scene, plane_scene, render

K = Intrinsics(30.0, 30.0, 16.0, 16.0, 32, 32)
VALID_CH = 16


def _view(image=None, pose=None, intr=K, t=0):
    rng = np.random.default_rng(t)
    img = rng.random((intr.height, intr.width, 3)) if image is None else image
    return CameraView(intr, pose or Pose.identity(), img, timestamp_index=t)


class TestRelativeMetadata:
    def test_self_source_dot_is_squared_norm(self):
        hyp = make_hypotheses(1.0, 50.0, 6)
        ref = _view()
        feat = np.random.default_rng(1).standard_normal((5, 8, 8))
        g = sweep_geometry(ref, ref, hyp)
        md = build_relative_metadata(feat, [feat], [g], hyp).data
        assert md.shape == (6, 1, 64, META_DIM)
        sq = (feat.reshape(5, -1) ** 2).sum(0)
        np.testing.assert_allclose(md[..., 0], np.broadcast_to(sq, (6, 1, 64)), rtol=1e-12)
        assert np.all(md[..., VALID_CH] == 1.0)
        # constant across planes for a copy of the reference
        assert np.ptp(md[..., 0], axis=0).max() < 1e-12

    def test_channel_layout(self):
        hyp = make_hypotheses(1.0, 50.0, 5)
        ref = _view()
        src = _view(pose=Pose(np.eye(3), np.array([0.3, 0.0, 0.0])), t=1)
        g = sweep_geometry(ref, src, hyp)
        feat = np.random.default_rng(1).standard_normal((4, 8, 8))
        md = build_relative_metadata(feat, [feat], [g], hyp).data[:, 0]
        np.testing.assert_allclose(np.linalg.norm(md[..., 1:4], axis=-1), 1.0, atol=1e-12)
        v = md[..., VALID_CH] == 1
        np.testing.assert_allclose(np.linalg.norm(md[..., 4:7], axis=-1)[v], 1.0, atol=1e-12)
        assert np.all(md[..., 4:7][~v] == 0)
        np.testing.assert_allclose(md[0, 0, 7:13], [1, 0, 0, 0, 1, 0], atol=1e-15)
        np.testing.assert_allclose(md[0, 0, 13:16], [-0.3, 0, 0], atol=1e-15)
        np.testing.assert_allclose(md[:, 0, 17], np.linspace(0, 1, 5), atol=1e-12)
        assert set(np.unique(md[..., VALID_CH])) <= {0.0, 1.0}

    def test_invalid_reprojection_zeroes_sample(self):
        hyp = make_hypotheses(1.0, 50.0, 8)
        ref = _view()
        # source 20 m ahead facing the same way: nearer planes lie behind it
        src = _view(pose=Pose(np.eye(3), np.array([0.0, 0.0, 20.0])), t=1)
        g = sweep_geometry(ref, src, hyp)
        behind = hyp.values < 20.0
        assert not g.valid[behind].any()
        feat = np.random.default_rng(1).standard_normal((4, 8, 8))
        md = build_relative_metadata(feat, [feat], [g], hyp).data
        assert np.all(md[behind, :, :, 0] == 0.0) and np.all(md[behind, :, :, VALID_CH] == 0.0)

    def test_needs_a_source(self):
        hyp = make_hypotheses(1.0, 50.0, 4)
        with pytest.raises(ValueError):
            build_relative_metadata(np.zeros((2, 8, 8)), [], [], hyp)


def test_plane_sweep_peaks_at_true_depth():
    hyp = make_hypotheses(1.0, 100.0, 64)
    k_true = 28
    b = render(plane_scene(depth=hyp.values[k_true], seed=0))[1]
    ref_f = photometric_features(b.reference.image)
    src_f = [photometric_features(s.image) for s in b.sources]
    geoms = [sweep_geometry(b.reference, s, hyp) for s in b.sources]
    md = build_relative_metadata(ref_f, src_f, geoms, hyp).data
    dots, valid = md[..., 0], md[..., VALID_CH]
    cnt = valid.sum(1)
    mean = np.where(cnt > 0, dots.sum(1) / np.maximum(cnt, 1), -np.inf)
    np.testing.assert_allclose(mean, sweep_scores(ref_f, src_f, geoms), atol=1e-12)
    hit = np.argmax(mean, axis=0) == k_true
    assert hit.mean() >= 0.99


class TestAbsoluteCosts:
    def _one_source(self, ref_prompt, src_prompt, hyp):
        ref = _view(intr=Intrinsics(30.0, 30.0, 16.0, 16.0, 32, 32))
        g = sweep_geometry(ref, ref, hyp)
        return build_absolute_costs([ref_prompt, src_prompt], hyp, [g])

    def test_zero_at_matching_hypothesis_and_sentinel(self):
        hyp = make_hypotheses(1.0, 50.0, 8)
        depth = np.full((8, 8), hyp.values[3])
        mask = np.ones((8, 8), bool)
        mask[2, 5] = False
        p = SparsePrompt(depth, mask)
        costs, flags = self._one_source(p, p, hyp)
        assert costs.shape == (8, 2, 64)
        idx = 2 * 8 + 5
        assert np.all(costs[:, :, idx] == SENTINEL) and not flags[:, :, idx].any()
        others = np.delete(costs[:, 0], idx, axis=1)
        assert np.all(others[3] == 0.0)
        np.testing.assert_allclose(others, np.abs(hyp.values[3] - hyp.values)[:, None] * np.ones(63))
        # self source: reprojected depth is d_k and the sample is P
        np.testing.assert_allclose(np.delete(costs[:, 1], idx, axis=1), others, atol=1e-12)

    def test_empty_prompt_is_all_sentinel(self):
        hyp = make_hypotheses(1.0, 50.0, 4)
        costs, flags = self._one_source(SparsePrompt.empty(8, 8), SparsePrompt.empty(8, 8), hyp)
        assert np.all(costs == SENTINEL) and not flags.any()

    def test_dense_exact_prompt_argmin_hits_nearest_bin(self):
        hyp = make_hypotheses(1.0, 20.0, 64)
        b = render(default_scene(64, 48, frames=2, seed=4))[0]
        q = [downsample_nearest_valid(p, 4) for p in b.prompts]
        geoms = [sweep_geometry(b.reference, s, hyp) for s in b.sources]
        costs, flags = build_absolute_costs(q, hyp, geoms)
        valid = q[0].mask.reshape(-1)
        assert valid.all()
        pd = q[0].depth.reshape(-1)
        oracle = np.array([min(range(hyp.count), key=lambda k: abs(d - hyp.values[k])) for d in pd])
        assert np.array_equal(np.argmin(costs[:, 0], axis=0)[valid], oracle[valid])

    def test_log_space_variant(self):
        hyp = make_hypotheses(1.0, 50.0, 8)
        p = SparsePrompt(np.full((8, 8), 4.0), np.ones((8, 8), bool))
        ref = _view()
        costs, _ = build_absolute_costs([p, p], hyp, [sweep_geometry(ref, ref, hyp)], log_space=True)
        np.testing.assert_allclose(costs[:, 0, 0], np.abs(np.log(4.0) - np.log(hyp.values)), atol=1e-12)

    def test_absolute_inputs_scaling(self):
        hyp = make_hypotheses(1.0, 10.0, 3)
        costs = np.array([[[2.0, -1.0]], [[4.0, 0.5]], [[-1.0, 3.0]]]).transpose(0, 2, 1)  # (3, 2, 1)
        flags = costs >= 0
        x = absolute_inputs(costs, flags, hyp)
        assert x.shape == (3, 1, 1, 4)
        np.testing.assert_allclose(x[:, 0, 0, 0], [2.0, 4.0 / hyp.values[1], SENTINEL])
        np.testing.assert_allclose(x[:, 0, 0, 2], [SENTINEL, 0.5 / hyp.values[1], 3.0 / 10.0])
        np.testing.assert_array_equal(x[:, 0, 0, 1], [1, 1, 0])


class TestAnchorCosts:
    def _inputs(self, nsrc, dsz=4, n=6, seed=0):
        rng = np.random.default_rng(seed)
        md = rng.standard_normal((dsz, nsrc, n, META_DIM))
        ab = rng.standard_normal((dsz, nsrc, n, 4))
        return md, ab, make_hypotheses(1.0, 10.0, dsz)

    def test_single_source_returns_score(self):
        md, ab, hyp = self._inputs(1)
        store = ParamStore(3)
        cv = anchor_costs(md, ab, store, hyp)
        cfg = CostVolumeConfig()
        rel = mlp(store, "pacv.rel", md, [cfg.rel_hidden, cfg.rel_feature_dim], final_activation=True)
        a = mlp(store, "pacv.abs", ab, [cfg.abs_hidden, cfg.abs_feature_dim], final_activation=True)
        s = mlp(store, "pacv.head", ops.concat([rel, a], axis=-1), [cfg.head_hidden, 2]).data[..., 1]
        np.testing.assert_allclose(cv.anchored.data, s[:, 0], atol=1e-14)

    def test_duplicate_views_give_equal_weights(self):
        md, ab, hyp = self._inputs(1)
        store = ParamStore(3)
        one = anchor_costs(md, ab, store, hyp).anchored.data
        two = anchor_costs(np.repeat(md, 2, axis=1), np.repeat(ab, 2, axis=1), store, hyp).anchored.data
        np.testing.assert_allclose(two, one, atol=1e-14)

    def test_permutation_invariance(self):
        md, ab, hyp = self._inputs(3, seed=5)
        store = ParamStore(1)
        base = anchor_costs(md, ab, store, hyp).anchored.data
        for perm in ([2, 0, 1], [1, 2, 0], [0, 2, 1]):
            out = anchor_costs(md[:, perm], ab[:, perm], store, hyp).anchored.data
            np.testing.assert_allclose(out, base, atol=1e-12)

    def test_view_mask_equals_dropping_view(self):
        md, ab, hyp = self._inputs(3, seed=2)
        store = ParamStore(1)
        masked = anchor_costs(md, ab, store, hyp, view_mask=[True, False, True]).anchored.data
        dropped = anchor_costs(md[:, [0, 2]], ab[:, [0, 2]], store, hyp).anchored.data
        np.testing.assert_allclose(masked, dropped, atol=1e-14)

    def test_zero_sources(self):
        md, ab, hyp = self._inputs(1)
        with pytest.raises(ValueError):
            anchor_costs(md[:, :0], ab[:, :0], ParamStore(0), hyp)


def _pair(size=32, seed=0):
    intr = Intrinsics(0.9 * size, 0.9 * size, size / 2, size / 2, size, size)
    rng = np.random.default_rng(seed)
    ref = _view(rng.random((size, size, 3)), intr=intr, t=0)
    srcs = [_view(rng.random((size, size, 3)), Pose(np.eye(3), np.array([dx, 0.0, 0.0])), intr, t=i + 1)
            for i, dx in enumerate((-0.4, 0.5))]
    depth = np.where(rng.random((size, size)) > 0.7, rng.uniform(2.0, 8.0, (size, size)), 0.0)
    prompts = [SparsePrompt.from_depth(np.roll(depth, k, axis=1)) for k in range(3)]
    return ref, srcs, prompts


def test_full_volume_is_finite_and_shaped():
    ref, srcs, prompts = _pair()
    hyp = make_hypotheses(1.0, 10.0, 6)
    store = ParamStore(0)
    feats = [extract_features(v, store) for v in [ref] + srcs]
    cv = build_cost_volume(ref, srcs, feats[0], feats[1:], prompts, hyp, store)
    assert cv.anchored.shape == (6, 8, 8) and np.all(np.isfinite(cv.anchored.data))


def test_end_to_end_gradient():
    ref, srcs, prompts = _pair()
    hyp = make_hypotheses(1.0, 10.0, 4)
    store = ParamStore(0)
    geoms = [sweep_geometry(ref, s, hyp) for s in srcs]

    def run():
        feats = [extract_features(v, store) for v in [ref] + srcs]
        return build_cost_volume(ref, srcs, feats[0], feats[1:], prompts, hyp, store, geoms=geoms).anchored

    run()
    params = [p for _, p in store.items()]
    report = grad_check(run, params, tolerance=1e-4, max_entries=6, name="pacv")
    assert report.passed, str(report)


class TestExtractor:
    def test_gradient(self):
        view = _view(np.random.default_rng(2).random((8, 8, 3)), intr=Intrinsics(8, 8, 4, 4, 8, 8))
        store = ParamStore(0)
        fn = lambda: extract_features(view, store).data  # noqa: E731
        fn()
        report = grad_check(fn, [p for _, p in store.items()], tolerance=1e-5, name="features")
        assert report.passed, str(report)

    def test_constant_image_gives_constant_interior(self):
        view = _view(np.full((32, 32, 3), 0.3))
        f = extract_features(view, ParamStore(0)).data.data
        assert f.shape == (32, 8, 8)
        interior = f[:, 1:, 1:]
        assert np.ptp(interior.reshape(32, -1), axis=1).max() < 1e-12

    def test_deterministic(self):
        view = _view()
        a = extract_features(view, ParamStore(4)).data.data
        b = extract_features(_view(), ParamStore(4)).data.data
        np.testing.assert_array_equal(a, b)

    def test_indivisible(self):
        with pytest.raises(GeometryError):
            extract_features(_view(np.zeros((30, 32, 3)), intr=Intrinsics(30, 30, 16, 15, 32, 30)), ParamStore(0))


def test_photometric_descriptor_is_normalized():
    f = photometric_features(np.random.default_rng(0).random((16, 24, 3)))
    assert f.shape == (192, 4, 6)
    np.testing.assert_allclose(np.linalg.norm(f, axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(f.mean(axis=0), 0.0, atol=1e-15)


def test_dump_round_trip(tmp_path):
    ref, srcs, prompts = _pair()
    hyp = make_hypotheses(1.0, 10.0, 5)
    store = ParamStore(0)
    feats = [extract_features(v, store) for v in [ref] + srcs]
    cv = build_cost_volume(ref, srcs, feats[0], feats[1:], prompts, hyp, store)
    path, header = dump_cost_volume(cv, tmp_path / "cv.pfm")
    vol, meta = load_cost_volume_dump(path)
    assert meta == {"d_min": 1.0, "d_max": 10.0, "count": 5, "dims": [8, 8]}
    np.testing.assert_array_equal(vol, cv.anchored.data.astype(np.float32))
