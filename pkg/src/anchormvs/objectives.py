"""Training losses and evaluation metrics for metric depth sequences."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .geometry import Intrinsics, Pose, depth_to_points

log = logging.getLogger(__name__)

DEFAULT_TAU_TEMP = 0.05


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool) & np.isfinite(v) & (v > 0)
        object.__setattr__(self, "values", np.where(m, v, 0.0))
        object.__setattr__(self, "valid", m)

    @classmethod
    def dense(cls, values) -> "DepthMap":
        v = np.asarray(values, dtype=np.float64)
        return cls(v, np.ones(v.shape, bool))

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LossBreakdown:
    depth: Tensor
    grad: Tensor
    normals: Tensor
    temporal: Tensor
    total: Tensor
    alpha: float = 1.0
    beta: float = 1.0

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).item()) for k in ("depth", "grad", "normals", "temporal", "total")}


def _upsample_to(x, shape) -> Tensor:
    h, w = ops._data(x).shape[-2:]
    f = shape[-1] // w
    if f * w != shape[-1] or f * h != shape[-2]:
        raise ValueError(f"prediction {(h, w)} is not an integer downscale of {tuple(shape[-2:])}")
    return x if f == 1 else ops.upsample_nearest(x, f)


def _zero() -> Tensor:
    return as_tensor(np.array(0.0))


def loss_depth(preds: Sequence, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Multi-scale log-depth L1; ``preds`` are depth maps ordered fine to coarse.

    Scale index ``s`` (1-based) is weighted by 1/s²; the sum is normalized by
    the number of valid ground-truth pixels.
    """
    n = int(valid.sum())
    if n == 0:
        log.warning("loss_depth: empty valid mask")
        return _zero()
    log_gt = np.log(np.where(valid, gt, 1.0))
    w = valid.astype(np.float64)
    total = None
    for s, p in enumerate(preds, start=1):
        up = _upsample_to(ops.log(p), gt.shape)
        term = ops.mul(ops.sum(ops.mul(ops.abs(ops.sub(up, log_gt)), w)), 1.0 / (s * s))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / n)


def _area_down(x, w: np.ndarray, f: int):
    """Valid-weighted f×f block mean; returns (tensor, counts)."""
    if f == 1:
        return ops.mul(x, w), w
    *lead, h, wd = w.shape
    cnt = w.reshape(*lead, h // f, f, wd // f, f).sum(axis=(-3, -1))
    s = ops.mul(ops.avg_pool2d(ops.mul(x, w), f), float(f * f))
    return ops.mul(s, 1.0 / np.maximum(cnt, 1.0)), cnt


def loss_grad(preds: Sequence, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Inverse-depth gradient matching, summed over scales.

    Scale ``s`` area-averages both inverse-depth maps over valid pixels in
    2^(s-1) blocks, takes forward differences in x and y and averages the L1
    mismatch over differences whose two cells both hold a valid pixel.
    """
    if not valid.any():
        log.warning("loss_grad: empty valid mask")
        return _zero()
    inv_gt = np.where(valid, 1.0 / np.where(valid, gt, 1.0), 0.0)
    w = valid.astype(np.float64)
    total = None
    for s, p in enumerate(preds, start=1):
        f = 2 ** (s - 1)
        inv_p = _upsample_to(ops.reciprocal(p), gt.shape)
        dp, cnt = _area_down(inv_p, w, f)
        dg, _ = _area_down(inv_gt, w, f)
        dg = ops._data(dg)
        ok = cnt > 0
        terms, count = [], 0
        for axis in (-1, -2):
            n = ok.shape[axis]
            lo = [slice(None)] * ok.ndim
            hi = [slice(None)] * ok.ndim
            lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
            lo, hi = tuple(lo), tuple(hi)
            m = (ok[hi] & ok[lo]).astype(np.float64)
            diff_p = ops.sub(ops.getitem(dp, hi), ops.getitem(dp, lo))
            diff_g = dg[hi] - dg[lo]
            terms.append(ops.sum(ops.mul(ops.abs(ops.sub(diff_p, diff_g)), m)))
            count += int(m.sum())
        if count == 0:
            continue
        term = ops.mul(ops.add(terms[0], terms[1]), 1.0 / count)
        total = term if total is None else ops.add(total, term)
    return _zero() if total is None else total


def _normals(points):
    """Unit normals from central-difference tangents on interior pixels.

    ``points`` is (..., H, W, 3); returns (normal components, cross-product norms) over
    (..., H-2, W-2).  The normal is tangent_y × tangent_x, so a
    fronto-parallel plane has normal (0, 0, -1).
    """
    ix = (Ellipsis, slice(1, -1), slice(2, None), slice(None))
    ixm = (Ellipsis, slice(1, -1), slice(0, -2), slice(None))
    iy = (Ellipsis, slice(2, None), slice(1, -1), slice(None))
    iym = (Ellipsis, slice(0, -2), slice(1, -1), slice(None))
    tx = ops.sub(ops.getitem(points, ix), ops.getitem(points, ixm))
    ty = ops.sub(ops.getitem(points, iy), ops.getitem(points, iym))
    comp = lambda t, i: ops.getitem(t, (Ellipsis, i))  # noqa: E731
    ax, ay, az = comp(ty, 0), comp(ty, 1), comp(ty, 2)
    bx, by, bz = comp(tx, 0), comp(tx, 1), comp(tx, 2)
    cx = ops.sub(ops.mul(ay, bz), ops.mul(az, by))
    cy = ops.sub(ops.mul(az, bx), ops.mul(ax, bz))
    cz = ops.sub(ops.mul(ax, by), ops.mul(ay, bx))
    sq = ops.add(ops.add(ops.square(cx), ops.square(cy)), ops.square(cz))
    nrm = np.sqrt(ops._data(sq))
    inv = ops.reciprocal(ops.sqrt(ops.where(nrm > 0, sq, 1.0)))
    return (ops.mul(cx, inv), ops.mul(cy, inv), ops.mul(cz, inv)), nrm


def _interior_valid(valid: np.ndarray) -> np.ndarray:
    v = valid
    return (v[..., 1:-1, 1:-1] & v[..., 1:-1, 2:] & v[..., 1:-1, :-2]
            & v[..., 2:, 1:-1] & v[..., :-2, 1:-1])


def loss_normals(pred, gt: np.ndarray, valid: np.ndarray, intrinsics: Intrinsics) -> Tensor:
    """Mean half cosine distance between predicted and ground-truth normals.

    Pixels count when the five-point stencil is valid in the ground truth and
    both normals are non-degenerate; borders are excluded.
    """
    rays = depth_to_points(np.ones(gt.shape[-2:]), intrinsics)
    p_pts = ops.mul(ops.reshape(pred, ops._data(pred).shape + (1,)), rays)
    g_pts = np.where(valid, gt, 0.0)[..., None] * rays
    (nx, ny, nz), pn = _normals(p_pts)
    (gx, gy, gz), gn = _normals(g_pts)
    gx, gy, gz = ops._data(gx), ops._data(gy), ops._data(gz)
    m = _interior_valid(valid) & (pn > 0) & (gn > 0)
    count = int(m.sum())
    if count == 0:
        log.warning("loss_normals: no pixel with defined normals")
        return _zero()
    # 1 - a·b written as |a - b|²/2 for unit vectors, so equal normals give exactly 0
    dist = ops.add(ops.add(ops.square(ops.sub(nx, gx)), ops.square(ops.sub(ny, gy))),
                   ops.square(ops.sub(nz, gz)))
    return ops.mul(ops.sum(ops.mul(dist, m.astype(np.float64))), 1.0 / (4.0 * count))


def loss_temporal(pred, gt: np.ndarray, valid: np.ndarray, tau_temp: float = DEFAULT_TAU_TEMP) -> Tensor:
    """Temporal gradient matching over consecutive frames of a (T, H, W) sequence.

    Each pair is averaged over pixels valid in both frames whose ground-truth
    change is below ``tau_temp`` meters; pairs are then averaged.
    """
    t = gt.shape[0]
    if t < 2:
        raise ValueError(f"loss_temporal needs T >= 2, got {t}")
    g = np.where(valid, gt, 0.0)
    dg = np.abs(g[1:] - g[:-1])
    m = valid[1:] & valid[:-1] & (dg < tau_temp)
    dp = ops.abs(ops.sub(ops.getitem(pred, slice(1, None)), ops.getitem(pred, slice(0, -1))))
    per_pair = m.reshape(t - 1, -1).sum(axis=1)
    weights = np.where(m, 1.0 / np.maximum(per_pair, 1)[:, None, None], 0.0)
    err = ops.abs(ops.sub(dp, dg))
    return ops.mul(ops.sum(ops.mul(err, weights)), 1.0 / (t - 1))


def total_loss(depth, grad, normals, temporal, alpha: float = 1.0, beta: float = 1.0) -> LossBreakdown:
    parts = [as_tensor(x) if not isinstance(x, Tensor) else x for x in (depth, grad, normals, temporal)]
    spatial = ops.add(ops.add(parts[0], parts[1]), parts[2])
    total = ops.add(ops.mul(spatial, alpha), ops.mul(parts[3], beta))
    return LossBreakdown(*parts, total, alpha, beta)


def compute_losses(preds: Sequence, gt: np.ndarray, valid: np.ndarray, intrinsics: Intrinsics,
                   alpha: float = 1.0, beta: float = 1.0,
                   tau_temp: float = DEFAULT_TAU_TEMP) -> LossBreakdown:
    """All four losses for a (T, H, W) sequence; ``preds`` fine to coarse, each (T, h, w)."""
    d = loss_depth(preds, gt, valid)
    g = loss_grad(preds, gt, valid)
    n = loss_normals(preds[0], gt, valid, intrinsics)
    t = loss_temporal(preds[0], gt, valid, tau_temp) if gt.shape[0] >= 2 else _zero()
    return total_loss(d, g, n, t, alpha, beta)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class ImageMetrics:
    id: str
    mae: float
    absrel: float
    tau: float
    count: int


@dataclass
class MetricReport:
    per_image: list[ImageMetrics]
    mean: dict[str, float]
    tae: float | None = None

    def to_dict(self) -> dict:
        return {"per_image": [{"id": m.id, "mae": m.mae, "absrel": m.absrel, "tau": m.tau}
                              for m in self.per_image],
                "mean": dict(self.mean), "tae": self.tae}


def image_metrics(pred, gt: DepthMap, image_id: str = "") -> ImageMetrics | None:
    """MAE, AbsRel and the strict 1.25 inlier ratio over valid ground-truth pixels."""
    p = pred.values if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
    m = gt.valid & np.isfinite(p) & (p > 0)
    if not m.any():
        log.warning("metrics: image %r has no valid overlap; excluded", image_id)
        return None
    pv, gv = p[m], gt.values[m]
    err = np.abs(pv - gv)
    ratio = np.maximum(pv / gv, gv / pv)
    return ImageMetrics(image_id, float(err.mean()), float((err / gv).mean()),
                        float((ratio < 1.25).mean()), int(m.sum()))


def aggregate(per_image: Sequence[ImageMetrics | None], tae_value: float | None = None) -> MetricReport:
    """Dataset means are taken over per-image values."""
    kept = [m for m in per_image if m is not None]
    mean = {k: float(np.mean([getattr(m, k) for m in kept])) if kept else math.nan
            for k in ("mae", "absrel", "tau")}
    return MetricReport(kept, mean, tae_value)


metrics = image_metrics


def forward_warp(depth: np.ndarray, src_pose: Pose, dst_pose: Pose, intrinsics: Intrinsics,
                 valid: np.ndarray | None = None) -> np.ndarray:
    """Splat depth from one view into another with a nearest-pixel z-buffer.

    Returns the destination-frame depth map, ``inf`` where nothing lands.
    """
    h, w = depth.shape
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= valid
    pts = depth_to_points(np.where(ok, depth, 1.0), intrinsics, src_pose)[ok]
    cam = dst_pose.inverse().apply(pts)
    z = cam[:, 2]
    front = z > 0
    cam, z = cam[front], z[front]
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    iu = np.floor(u[inside]).astype(np.int64)
    iv = np.floor(v[inside]).astype(np.int64)
    buf = np.full(h * w, np.inf)
    np.minimum.at(buf, iv * w + iu, z[inside])
    return buf.reshape(h, w)


def _pair_absrel(warped: np.ndarray, target: np.ndarray) -> float | None:
    hit = np.isfinite(warped) & np.isfinite(target) & (target > 0)
    if not hit.any():
        return None
    return float((np.abs(warped[hit] - target[hit]) / target[hit]).mean())


def tae(preds: Sequence[np.ndarray], poses: Sequence[Pose], intrinsics: Intrinsics) -> float:
    """Symmetrized temporal alignment error over adjacent frame pairs."""
    if len(preds) < 2:
        raise ValueError("tae needs at least two frames")
    if len(poses) != len(preds):
        raise ValueError(f"{len(preds)} predictions but {len(poses)} poses")
    terms = []
    for k in range(len(preds) - 1):
        a, b = np.asarray(preds[k], float), np.asarray(preds[k + 1], float)
        fwd = _pair_absrel(forward_warp(a, poses[k], poses[k + 1], intrinsics), b)
        bwd = _pair_absrel(forward_warp(b, poses[k + 1], poses[k], intrinsics), a)
        if fwd is None or bwd is None:
            log.warning("tae: frames %d/%d do not overlap; pair skipped", k, k + 1)
            continue
        terms.extend([fwd, bwd])
    if not terms:
        return math.nan
    return float(np.mean(terms))
