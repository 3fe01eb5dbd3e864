"""Sparse LiDAR prompts: synthesis, logit normalization and encoding."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ParamStore, Tensor, conv, ops
from .geometry import CameraView, GeometryError, Intrinsics, depth_to_points, rotation_from_axis_angle

log = logging.getLogger(__name__)


class PromptSpace(str, enum.Enum):
    METRIC = "metric"
    LOGIT = "logit"


@dataclass(frozen=True, eq=False)
class SparsePrompt:
    depth: np.ndarray
    mask: np.ndarray
    space: PromptSpace = PromptSpace.METRIC
    clamped: int = 0
    empty_gt: bool = False

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        depth = np.where(mask, np.asarray(self.depth, dtype=np.float64), 0.0)
        if depth.shape != mask.shape:
            raise ValueError(f"prompt depth {depth.shape} and mask {mask.shape} differ")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, height: int, width: int, space: PromptSpace = PromptSpace.METRIC) -> "SparsePrompt":
        return cls(np.zeros((height, width)), np.zeros((height, width), bool), space)

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "SparsePrompt":
        """Metric prompt whose mask is implied by nonzero finite entries."""
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, np.isfinite(depth) & (depth > 0))

    @property
    def density(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class PromptCorruption:
    """Parameters of the simulated LiDAR pattern and its artifacts.

    ``beams=None`` disables beam selection.  Angles are radians, lengths meters.
    """

    beams: int | None = 16
    inclination_offset: float = 0.0
    azimuth_phase: float = 0.0
    radial_noise_sigma: float = 0.0
    dropout_fraction: float = 0.0
    outlier_fraction: float = 0.0
    occlusion_from_bottom: float = 0.0
    seed: int = 0
    max_extrinsic_rotation_deg: float = 0.0
    max_extrinsic_translation: float = 0.0
    boundary_threshold: float = 0.5
    boundary_noise_factor: float = 3.0
    d_min: float = 1.0
    d_max: float = 100.0

    def __post_init__(self):
        for name in ("dropout_fraction", "outlier_fraction", "occlusion_from_bottom"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.beams is not None and self.beams < 1:
            raise ValueError(f"beams must be >= 1, got {self.beams}")
        if self.radial_noise_sigma < 0:
            raise ValueError("radial_noise_sigma must be non-negative")

    @classmethod
    def identity(cls, **kw) -> "PromptCorruption":
        return cls(beams=None, **kw)

    @classmethod
    def randomized(cls, rng: np.random.Generator, d_min: float, d_max: float) -> "PromptCorruption":
        """Training-time draw: 8-64 beams, random angle offset and shift."""
        return cls(beams=int(rng.integers(8, 65)),
                   inclination_offset=float(rng.uniform(-0.02, 0.02)),
                   azimuth_phase=float(rng.uniform(-math.pi, math.pi)),
                   radial_noise_sigma=float(rng.uniform(0.0, 0.05)),
                   dropout_fraction=float(rng.uniform(0.0, 0.5)),
                   outlier_fraction=float(rng.uniform(0.0, 0.02)),
                   seed=int(rng.integers(2**31)),
                   max_extrinsic_rotation_deg=2.0, max_extrinsic_translation=0.2,
                   d_min=d_min, d_max=d_max)


def _virtual_extrinsic(c: PromptCorruption, rng: np.random.Generator):
    axis = rng.standard_normal(3)
    angle = math.radians(rng.uniform(0.0, c.max_extrinsic_rotation_deg))
    rot = rotation_from_axis_angle(axis, angle)
    yaw = rotation_from_axis_angle([0.0, 1.0, 0.0], c.azimuth_phase)
    shift = rng.uniform(-c.max_extrinsic_translation, c.max_extrinsic_translation, 3)
    return yaw @ rot, shift


def beam_mask(inclination: np.ndarray, valid: np.ndarray, beams: int, offset: float,
              line_width: float) -> np.ndarray:
    """Pixels lying on one of ``beams`` equally spaced inclination lines.

    The valid inclination span is split into ``beams`` bins; a pixel is kept
    when it lies within ``line_width / 2`` of a bin center, the tolerance
    being capped at half a bin so beams never overlap.
    """
    if not valid.any():
        return np.zeros_like(valid)
    lo, hi = inclination[valid].min(), inclination[valid].max()
    width = max(hi - lo, 1e-12) / beams
    tol = min(0.5 * line_width, 0.5 * width)
    rel = (inclination - lo - offset) / width - 0.5
    nearest = np.clip(np.round(rel), 0, beams - 1)
    dist = np.abs(rel - nearest) * width
    return valid & (dist <= tol)


def beam_index(inclination: np.ndarray, valid: np.ndarray, beams: int, offset: float) -> np.ndarray:
    lo, hi = inclination[valid].min(), inclination[valid].max()
    width = max(hi - lo, 1e-12) / beams
    return np.clip(np.round((inclination - lo - offset) / width - 0.5), 0, beams - 1).astype(int)


def sensor_inclination(gt_depth: np.ndarray, intrinsics: Intrinsics, rot: np.ndarray,
                       shift: np.ndarray) -> np.ndarray:
    """Elevation angle of each pixel's 3D point seen from the virtual sensor."""
    pts = depth_to_points(np.where(gt_depth > 0, gt_depth, 1.0), intrinsics)
    sensor = (pts - shift) @ rot
    up = -sensor[..., 1]
    return np.arctan2(up, np.hypot(sensor[..., 0], sensor[..., 2]))


def synthesize_prompt(gt_depth: np.ndarray, view: CameraView | Intrinsics,
                      corruption: PromptCorruption) -> SparsePrompt:
    """Simulate a sparse LiDAR prompt from dense ground truth (metric space).

    Deterministic in ``(gt_depth, view, corruption)``.
    """
    intr = view.intrinsics if isinstance(view, CameraView) else view
    gt = np.asarray(gt_depth, dtype=np.float64)
    valid = np.isfinite(gt) & (gt > 0)
    h, w = gt.shape
    if not valid.any():
        log.warning("synthesize_prompt: ground truth has no valid pixel")
        return replace(SparsePrompt.empty(h, w), empty_gt=True)
    c = corruption
    rng = np.random.default_rng(c.seed)
    rot, shift = _virtual_extrinsic(c, rng)

    keep = valid.copy()
    if c.beams is not None:
        incl = sensor_inclination(gt, intr, rot, shift)
        # one image row subtends roughly 1/fy radians near the axis
        keep = beam_mask(incl, valid, c.beams, c.inclination_offset, line_width=1.0 / intr.fy)

    depth = np.where(keep, gt, 0.0)
    idx = np.flatnonzero(keep)
    if c.radial_noise_sigma > 0 and idx.size:
        gy, gx = np.gradient(np.where(valid, gt, 0.0))
        edge = np.hypot(gx, gy).ravel()[idx] > c.boundary_threshold
        sigma = np.where(edge, c.boundary_noise_factor * c.radial_noise_sigma, c.radial_noise_sigma)
        rays = depth_to_points(np.ones_like(gt), intr).reshape(-1, 3)[idx]
        ray_len = np.linalg.norm(rays, axis=1)
        radial = depth.ravel()[idx] * ray_len + rng.standard_normal(idx.size) * sigma
        depth.ravel()[idx] = np.maximum(radial / ray_len, 1e-3)
    if c.outlier_fraction > 0 and idx.size:
        n_out = int(round(c.outlier_fraction * idx.size))
        chosen = rng.choice(idx, size=n_out, replace=False)
        depth.ravel()[chosen] = rng.uniform(c.d_min, c.d_max, size=n_out)
    if c.dropout_fraction > 0 and idx.size:
        n_drop = int(round(c.dropout_fraction * idx.size))
        dropped = rng.choice(idx, size=n_drop, replace=False)
        keep.ravel()[dropped] = False
    if c.occlusion_from_bottom > 0:
        rows = int(round(c.occlusion_from_bottom * h))
        if rows:
            keep[h - rows:] = False
    return SparsePrompt(depth, keep & valid)


def normalize_to_logit(prompt: SparsePrompt, d_min: float, d_max: float, eps: float = 1e-6) -> SparsePrompt:
    """Map metric depths to the logit of their log-normalized position in [d_min, d_max]."""
    if not d_min < d_max:
        raise ValueError(f"need d_min < d_max, got {d_min}, {d_max}")
    if prompt.space is PromptSpace.LOGIT:
        return prompt
    m = prompt.mask
    d = np.where(m, prompt.depth, math.sqrt(d_min * d_max))
    norm = (np.log(d) - math.log(d_min)) / (math.log(d_max) - math.log(d_min))
    clipped = np.clip(norm, eps, 1.0 - eps)
    n_clamped = int(((clipped != norm) & m).sum())
    if n_clamped:
        log.info("normalize_to_logit: clamped %d prompt pixels", n_clamped)
    logit = np.log(clipped / (1.0 - clipped))
    return SparsePrompt(np.where(m, logit, 0.0), m, PromptSpace.LOGIT, clamped=n_clamped)


def downsample_nearest_valid(prompt: SparsePrompt, factor: int) -> SparsePrompt:
    """Pick, in each factor×factor cell, the valid pixel closest to the cell center."""
    h, w = prompt.mask.shape
    if h % factor or w % factor:
        raise ValueError(f"prompt {h}x{w} not divisible by {factor}")
    hh, ww = h // factor, w // factor
    d = prompt.depth.reshape(hh, factor, ww, factor).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    m = prompt.mask.reshape(hh, factor, ww, factor).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    off = np.arange(factor) + 0.5 - factor / 2
    dist = (off[:, None] ** 2 + off[None, :] ** 2).ravel()
    # ties broken by raster order through the stable argsort of distance
    order = np.argsort(dist, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    score = np.where(m, rank, order.size)
    pick = score.argmin(axis=-1)
    depth = np.take_along_axis(d, pick[..., None], axis=-1)[..., 0]
    mask = m.any(axis=-1)
    return SparsePrompt(depth, mask, prompt.space)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class MetricTokens:
    tokens: Tensor          # (..., n, D)
    token_mask: np.ndarray  # (..., n)
    grid: tuple[int, int]


def _or_pool(mask: np.ndarray) -> np.ndarray:
    *lead, h, w = mask.shape
    return mask.reshape(*lead, h // 2, 2, w // 2, 2).any(axis=(-3, -1))


def encode_prompt(prompts, store: ParamStore, dim: int = 64, widths=(8, 16, 32, 32),
                  prefix: str = "prompt_enc") -> MetricTokens:
    """Sparsity-aware encoder from full-resolution logit prompts to 1/16 tokens.

    ``prompts`` is one logit :class:`SparsePrompt` or a list (one per frame).
    """
    single = isinstance(prompts, SparsePrompt)
    plist = [prompts] if single else list(prompts)
    for p in plist:
        if p.space is not PromptSpace.LOGIT:
            raise ValueError("encode_prompt expects logit-space prompts")
    h, w = plist[0].mask.shape
    if h % 16 or w % 16:
        raise GeometryError(f"prompt {h}x{w} not divisible by 16")
    mask = np.stack([p.mask for p in plist])
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    x_in = np.stack([np.stack([p.depth * p.mask, p.mask.astype(float), yy, xx]) for p in plist])

    x = ops.silu(conv(store, f"{prefix}.stem", x_in, widths[0], k=3, stride=2))
    m = _or_pool(mask)
    for i, width in enumerate(widths[1:]):
        x = ops.silu(conv(store, f"{prefix}.stage{i}", x, width, k=3))
        x, m = ops.masked_max_pool(x, m)
    x = conv(store, f"{prefix}.proj", x, dim, k=1)
    b, _, gh, gw = x.shape
    tokens = ops.transpose(ops.reshape(x, (b, dim, gh * gw)), (0, 2, 1))
    tokens = ops.add(tokens, ops.sinusoidal_embedding_2d(gh, gw, dim))
    tmask = m.reshape(b, gh * gw)
    tokens = ops.mul(tokens, tmask[..., None].astype(np.float64))
    if single:
        tokens = ops.reshape(tokens, (gh * gw, dim))
        tmask = tmask[0]
    return MetricTokens(tokens, tmask, (gh, gw))


class Availability(str, enum.Enum):
    BOTH = "both"
    REFERENCE_ONLY = "reference_only"
    SOURCES_ONLY = "sources_only"


AVAILABILITY_PROBS = {Availability.BOTH: 0.5, Availability.REFERENCE_ONLY: 0.25,
                      Availability.SOURCES_ONLY: 0.25}


def sample_prompt_availability(seed) -> Availability:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random()
    if u < 0.5:
        return Availability.BOTH
    return Availability.REFERENCE_ONLY if u < 0.75 else Availability.SOURCES_ONLY


def drop_modality(tokens: Tensor, probability: float = 0.5, seed=0,
                  mask: np.ndarray | None = None):
    """Zero a whole token stream with the given probability.

    Returns ``(tokens, mask, dropped)``; the mask is falsified when dropped.
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dropped = bool(rng.random() < probability)
    if not dropped:
        return tokens, mask, False
    out = ops.mul(tokens, 0.0)
    return out, None if mask is None else np.zeros_like(mask, dtype=bool), True
