"""Prompt-anchored plane-sweep cost volume.

For every quarter-resolution reference pixel and depth hypothesis the
reference ray is cut at ``d_k``, reprojected into each source view and
described by a metadata vector (feature agreement, ray directions, relative
pose, validity, normalized hypothesis depth).  Absolute prompt costs
``|P - d|`` (``-1`` where no prompt is available) are scored alongside.  A
shared head turns each (plane, source) pair into a weight and a score; the
anchored cost is the softmax-weighted score over sources.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ParamStore, Tensor, conv, mlp, ops
from .geometry import CameraView, DepthHypothesisSet, GeometryError, Intrinsics, relative_pose
from .pfm import read_pfm, write_pfm
from .prompt import SparsePrompt, downsample_nearest_valid

META_DIM = 18
SENTINEL = -1.0


@dataclass
class FeatureMap:
    data: Tensor          # (C, h, w)
    view_id: object = None

    @property
    def shape(self):
        return self.data.shape


@dataclass
class CostVolumeConfig:
    rel_feature_dim: int = 16
    abs_feature_dim: int = 16
    rel_hidden: int = 64
    abs_hidden: int = 32
    head_hidden: int = 32
    feature_channels: tuple[int, int] = (16, 32)
    log_abs_costs: bool = False


@dataclass
class CostVolume:
    anchored: Tensor      # (D, h, w)
    hypotheses: DepthHypothesisSet
    rel_feature_dim: int = 16
    abs_feature_dim: int = 16


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def image_tensor(images) -> np.ndarray:
    """(B, H, W, 3) or a list of views -> (B, 3, H, W), centered at 0."""
    if isinstance(images, CameraView):
        images = [images]
    if isinstance(images, (list, tuple)):
        images = np.stack([v.image if isinstance(v, CameraView) else v for v in images])
    arr = np.asarray(images, dtype=np.float64)
    return np.transpose(arr, (0, 3, 1, 2)) - 0.5


def feature_stack(images, store: ParamStore, channels=(16, 32), prefix: str = "feat"):
    """Two stride-2 stages; returns the 1/4 features and the pooled 1/8 skip."""
    x = image_tensor(images)
    _, _, h, w = x.shape
    if h % 8 or w % 8:
        raise GeometryError(f"image {h}x{w} not divisible by 8")
    x = ops.silu(conv(store, f"{prefix}.s1", x, channels[0], k=3, stride=2))
    x = ops.silu(conv(store, f"{prefix}.s2", x, channels[1], k=3, stride=2))
    return x, ops.avg_pool2d(x, 2)


def extract_features(view: CameraView, store: ParamStore, channels=(16, 32)) -> FeatureMap:
    h, w = view.image.shape[:2]
    if h % 4 or w % 4:
        raise GeometryError(f"image {h}x{w} not divisible by 4")
    x = image_tensor([view])
    x = ops.silu(conv(store, "feat.s1", x, channels[0], k=3, stride=2))
    x = ops.silu(conv(store, "feat.s2", x, channels[1], k=3, stride=2))
    return FeatureMap(ops.getitem(x, 0), view_id=view.timestamp_index)


def photometric_features(image: np.ndarray, margin: int = 2) -> np.ndarray:
    """Fixed matching descriptor at quarter resolution.

    Each quarter cell is described by the colors of its 4×4 pixel block
    grown by ``margin`` pixels on every side (reflected at the border),
    mean-subtracted and unit-normalized, so dot products act as normalized
    cross-correlation.  Returns (C, H/4, W/4).
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if h % 4 or w % 4:
        raise GeometryError(f"image {h}x{w} not divisible by 4")
    size = 4 + 2 * margin
    padded = np.pad(img, ((margin, margin), (margin, margin), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (size, size), axis=(0, 1))[::4, ::4]   # (h/4, w/4, 3, s, s)
    feat = win.transpose(2, 3, 4, 0, 1).reshape(-1, h // 4, w // 4)
    feat = feat - feat.mean(axis=0, keepdims=True)
    return feat / np.maximum(np.linalg.norm(feat, axis=0, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# geometry of the sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepGeometry:
    """Per (reference, source, hypotheses) reprojection data at quarter resolution.

    Arrays are indexed (k, pixel) with pixels flattened row-major.
    """
    coords: np.ndarray        # (D, n, 2) continuous source coordinates
    depth: np.ndarray         # (D, n) source camera-frame depth
    valid: np.ndarray         # (D, n) bilinear sample fully inside, in front
    weights: sp.csr_matrix    # (D*n, n_src) bilinear matrix
    ref_dir: np.ndarray       # (n, 3) unit reference rays (world)
    src_dir: np.ndarray       # (D, n, 3) unit rays from source center to the point
    rel_pose: np.ndarray      # (9,)
    grid: tuple[int, int]
    src_grid: tuple[int, int]


def quarter_intrinsics(intr: Intrinsics) -> Intrinsics:
    return intr.scaled(4)


def sweep_geometry(ref: CameraView, src: CameraView, hyp: DepthHypothesisSet,
                   feature_grid: tuple[int, int] | None = None,
                   src_grid: tuple[int, int] | None = None) -> SweepGeometry:
    kr = quarter_intrinsics(ref.intrinsics)
    ks = quarter_intrinsics(src.intrinsics)
    h, w = feature_grid or (ref.intrinsics.height // 4, ref.intrinsics.width // 4)
    hs, ws = src_grid or (src.intrinsics.height // 4, src.intrinsics.width // 4)
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    cam = np.stack([(jj - kr.cx) / kr.fx, (ii - kr.cy) / kr.fy, np.ones_like(jj)], -1).reshape(-1, 3)
    rays_w = cam @ ref.pose.rotation.T
    ref_dir = rays_w / np.linalg.norm(rays_w, axis=1, keepdims=True)
    d = hyp.values[:, None, None]
    pts = ref.pose.translation + d * rays_w[None]                 # (D, n, 3)
    pc = (pts - src.pose.translation) @ src.pose.rotation          # source camera frame
    z = pc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = ks.fx * pc[..., 0] / zs + ks.cx
    v = ks.fy * pc[..., 1] / zs + ks.cy
    coords = np.stack([u, v], -1)
    coords = np.where(front[..., None], coords, np.nan)
    weights, inside = ops.bilinear_weights(coords.reshape(-1, 2), hs, ws)
    valid = inside.reshape(z.shape) & front
    sd = pts - src.pose.translation
    src_dir = sd / np.maximum(np.linalg.norm(sd, axis=-1, keepdims=True), 1e-12)
    rel = relative_pose(ref.pose, src.pose)
    rel_vec = np.concatenate([rel.rotation[:, 0], rel.rotation[:, 1], rel.translation])
    return SweepGeometry(coords, np.where(front, z, 0.0), valid, weights, ref_dir, src_dir, rel_vec,
                         (h, w), (hs, ws))


def build_relative_metadata(ref_feat, src_feats: Sequence, geoms: Sequence[SweepGeometry],
                            hyp: DepthHypothesisSet) -> Tensor:
    """Metadata tensor (D, N, n, 18).  Only the dot-product channel is differentiable.

    Channel layout: dot, reference ray (3), source ray (3), relative rotation
    columns (6), relative translation (3), validity, normalized log depth.
    """
    if not src_feats:
        raise ValueError("need at least one source view")
    fr = ref_feat.data if isinstance(ref_feat, FeatureMap) else ref_feat
    c, h, w = ops._data(fr).shape
    fr_flat = ops.reshape(fr, (c, 1, h * w))
    dsz, n = hyp.count, h * w
    lognorm = np.broadcast_to(hyp.normalized_log()[:, None, None], (dsz, n, 1))
    dots, consts = [], []
    for sf, g in zip(src_feats, geoms):
        fs = sf.data if isinstance(sf, FeatureMap) else sf
        cs, hs, ws = ops._data(fs).shape
        sampled = ops.sparse_sample(ops.reshape(fs, (cs, hs * ws)), g.weights)   # (C, D*n)
        sampled = ops.reshape(sampled, (cs, dsz, n))
        dots.append(ops.sum(ops.mul(sampled, fr_flat), axis=0))                  # (D, n)
        val = g.valid.astype(np.float64)[..., None]
        consts.append(np.concatenate([
            np.broadcast_to(g.ref_dir[None], (dsz, n, 3)),
            g.src_dir * val,
            np.broadcast_to(g.rel_pose, (dsz, n, 9)),
            val, lognorm], axis=-1))
    dot = ops.reshape(ops.stack(dots, axis=1), (dsz, len(dots), n, 1))
    return ops.concat([dot, np.stack(consts, axis=1)], axis=-1)


def build_absolute_costs(prompts: Sequence[SparsePrompt], hyp: DepthHypothesisSet,
                         geoms: Sequence[SweepGeometry], log_space: bool = False):
    """Costs (D, 1 + N, n) and validity flags; sentinel -1 where invalid.

    ``prompts`` are metric quarter-resolution prompts, reference first.  The
    reference compares ``P_r`` with ``d_k``; source ``j`` compares its
    nearest-neighbor prompt sample at the reprojection with the reprojected
    depth.
    """
    ref = prompts[0]
    d = hyp.values[:, None]
    dsz = hyp.count
    pr = ref.depth.reshape(-1)
    mr = ref.mask.reshape(-1)
    n = pr.size

    def diff(p, q):
        if log_space:
            return np.abs(np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12)))
        return np.abs(p - q)

    costs = [np.where(mr[None], diff(pr[None], d), SENTINEL) * np.ones((dsz, 1))]
    flags = [np.broadcast_to(mr[None], (dsz, n)).copy()]
    for p, g in zip(prompts[1:], geoms):
        hs, ws = p.mask.shape
        u = np.nan_to_num(g.coords[..., 0], nan=-1.0)
        v = np.nan_to_num(g.coords[..., 1], nan=-1.0)
        iu, iv = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
        inb = (g.depth > 0) & (iu >= 0) & (iu < ws) & (iv >= 0) & (iv < hs)
        flat = np.where(inb, iv * ws + np.clip(iu, 0, ws - 1), 0)
        flat = np.clip(flat, 0, hs * ws - 1)
        ok = inb & p.mask.reshape(-1)[flat]
        val = p.depth.reshape(-1)[flat]
        costs.append(np.where(ok, diff(val, g.depth), SENTINEL))
        flags.append(ok)
    return np.stack(costs, axis=1), np.stack(flags, axis=1)


def absolute_inputs(costs: np.ndarray, flags: np.ndarray, hyp: DepthHypothesisSet) -> np.ndarray:
    """Per-source MLP input (D, N, n, 4): [ref cost, ref flag, source cost, source flag].

    Valid costs are divided by ``d_k`` so their scale does not grow with depth;
    the -1 sentinel is kept as is.
    """
    d = hyp.values[:, None, None]
    scaled = np.where(flags, costs / d, SENTINEL)
    ref_c = np.broadcast_to(scaled[:, :1], scaled[:, 1:].shape)
    ref_f = np.broadcast_to(flags[:, :1], flags[:, 1:].shape)
    return np.stack([ref_c, ref_f.astype(float), scaled[:, 1:], flags[:, 1:].astype(float)], axis=-1)


def anchor_costs(metadata, abs_inputs: np.ndarray, store: ParamStore, hyp: DepthHypothesisSet,
                 cfg: CostVolumeConfig = CostVolumeConfig(), grid: tuple[int, int] | None = None,
                 view_mask: np.ndarray | None = None, prefix: str = "pacv") -> CostVolume:
    """Score every (plane, source) pair and softmax-aggregate over sources."""
    md = ops._data(metadata)
    dsz, nsrc, n, _ = md.shape
    if nsrc == 0:
        raise ValueError("anchor_costs needs at least one source view")
    rel = mlp(store, f"{prefix}.rel", metadata, [cfg.rel_hidden, cfg.rel_feature_dim], final_activation=True)
    ab = mlp(store, f"{prefix}.abs", abs_inputs, [cfg.abs_hidden, cfg.abs_feature_dim], final_activation=True)
    head = mlp(store, f"{prefix}.head", ops.concat([rel, ab], axis=-1), [cfg.head_hidden, 2])
    omega = ops.getitem(head, (Ellipsis, 0))                     # (D, N, n)
    score = ops.getitem(head, (Ellipsis, 1))
    if view_mask is None:
        mask = np.ones((dsz, nsrc, n), bool)
    else:
        vm = np.asarray(view_mask, bool)
        mask = np.broadcast_to(vm[None, :, None] if vm.ndim == 1 else vm, (dsz, nsrc, n))
    wts = ops.masked_softmax(ops.swapaxes(omega, 1, 2), np.swapaxes(mask, 1, 2), axis=-1)
    anchored = ops.sum(ops.mul(wts, ops.swapaxes(score, 1, 2)), axis=-1)   # (D, n)
    if grid is not None:
        anchored = ops.reshape(anchored, (dsz,) + tuple(grid))
    return CostVolume(anchored, hyp, cfg.rel_feature_dim, cfg.abs_feature_dim)


def build_cost_volume(ref: CameraView, sources: Sequence[CameraView], ref_feat, src_feats,
                      prompts: Sequence[SparsePrompt], hyp: DepthHypothesisSet, store: ParamStore,
                      cfg: CostVolumeConfig = CostVolumeConfig(), geoms=None) -> CostVolume:
    """Full construction for one reference frame.

    ``prompts`` are full-resolution metric prompts (reference first); they are
    reduced to quarter resolution by nearest-valid selection.
    """
    if not sources:
        raise ValueError("need at least one source view")
    fr = ref_feat.data if isinstance(ref_feat, FeatureMap) else ref_feat
    _, h, w = ops._data(fr).shape
    if geoms is None:
        geoms = [sweep_geometry(ref, s, hyp, (h, w)) for s in sources]
    meta = build_relative_metadata(fr, src_feats, geoms, hyp)
    q = [p if p.mask.shape == (h, w) else downsample_nearest_valid(p, p.mask.shape[0] // h) for p in prompts]
    costs, flags = build_absolute_costs(q, hyp, geoms, cfg.log_abs_costs)
    return anchor_costs(meta, absolute_inputs(costs, flags, hyp), store, hyp, cfg, (h, w))


def sweep_scores(ref_feat: np.ndarray, src_feats: Sequence[np.ndarray], geoms: Sequence[SweepGeometry]) -> np.ndarray:
    """Feature dot product averaged over the sources with a valid sample, (D, n).

    Entries with no valid source are ``-inf``.
    """
    c = ref_feat.shape[0]
    fr = ref_feat.reshape(c, -1)
    total, count = 0.0, 0
    for fs, g in zip(src_feats, geoms):
        cs = fs.shape[0]
        sampled = np.asarray((g.weights @ fs.reshape(cs, -1).T).T).reshape(cs, g.valid.shape[0], -1)
        total = total + (sampled * fr[:, None, :]).sum(axis=0) * g.valid
        count = count + g.valid
    return np.where(count > 0, total / np.maximum(count, 1), -np.inf)


def dump_cost_volume(cv: CostVolume, path) -> tuple[Path, Path]:
    """Write the anchored volume as a PFM with planes stacked along rows plus a JSON header."""
    path = Path(path)
    data = ops._data(cv.anchored)
    dsz = cv.hypotheses.count
    planes = data.reshape(dsz, *data.shape[-2:])
    write_pfm(path, planes.reshape(-1, planes.shape[-1]))
    header = path.with_suffix(".json")
    header.write_text(json.dumps({"d_min": cv.hypotheses.d_min, "d_max": cv.hypotheses.d_max,
                                  "count": dsz, "dims": list(planes.shape[-2:])}))
    return path, header


def load_cost_volume_dump(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    h, w = header["dims"]
    return read_pfm(path).reshape(header["count"], h, w), header
