"""Multi-scale decoder with ray-conditioned temporal attention.

Fused 1/16 tokens are upsampled to full resolution through 1/8, 1/4 and
1/2, fusing extractor skips at 1/8 and 1/4.  At the two coarsest stages a
temporal layer lets every token attend to the same token in the other frames
after adding a Fourier-featured ray embedding and a sinusoidal frame index.
Logit heads at 1/8, 1/4, 1/2 and 1/1 are mapped to metric depth by a
sigmoid rescaled in log space between ``d_min`` and ``d_max``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .autodiff import ParamStore, Tensor, conv, dense, feed_forward, mlp, multi_head_attention, norm, ops
from .geometry import CameraView, GeometryError, camera_ray


@dataclass
class DecoderConfig:
    widths: tuple[int, int, int, int] = (32, 16, 8, 8)   # channels at 1/8, 1/4, 1/2, 1/1
    heads: int = 4
    ffn_mult: int = 2
    bands: int = 6
    temporal: bool = True


@dataclass
class LogitMap:
    x: Tensor                       # (T, H, W) full-resolution logits
    scales: list                    # four (T, h, w) logit maps, fine to coarse

    def depths(self, d_min: float, d_max: float) -> list:
        return [recover_depth(s, d_min, d_max) for s in self.scales]


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def fourier_features(v, bands: int = 6) -> np.ndarray:
    """``[sin(2^k π v), cos(2^k π v)]`` for k = 0..bands-1, concatenated along the last axis."""
    if bands < 1:
        raise ValueError("need at least one band")
    v = np.asarray(v, dtype=np.float64)
    parts = []
    for k in range(bands):
        a = (2.0 ** k) * math.pi * v
        parts += [np.sin(a), np.cos(a)]
    return np.concatenate(parts, axis=-1)


def cell_centers(grid: tuple[int, int], stride: int) -> np.ndarray:
    """Full-resolution pixel coordinates (n, 2) of token-cell centers, row-major."""
    gh, gw = grid
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    return np.stack([(jj.ravel() + 0.5) * stride, (ii.ravel() + 0.5) * stride], axis=-1)


def ray_inputs(views: Sequence[CameraView], grid: tuple[int, int], stride: int,
               scene_scale: float) -> np.ndarray:
    """(T, n, 6) ``[origin / scene_scale, unit direction]`` per token cell."""
    pix = cell_centers(grid, stride)
    out = []
    for t, view in enumerate(views):
        if getattr(view, "pose", None) is None:
            raise GeometryError(f"frame {t} has no pose")
        o, d = camera_ray(pix, view)
        out.append(np.concatenate([o / scene_scale, d], axis=-1))
    return np.stack(out)


def geo_embed(views: Sequence[CameraView], grid: tuple[int, int], stride: int, store: ParamStore,
              dim: int, scene_scale: float, bands: int = 6, prefix: str = "geo") -> Tensor:
    """Two-layer MLP over Fourier features of the ray through every cell center."""
    feats = fourier_features(ray_inputs(views, grid, stride, scene_scale), bands)
    return mlp(store, prefix, feats, [dim, dim])


def temporal_layer(features, geo, store: ParamStore, name: str, heads: int = 4, ffn_mult: int = 2,
                   single_key_shortcut: bool = False) -> Tensor:
    """Residual attention across frames for each token independently, then a residual FFN.

    ``features`` and ``geo`` are (T, n, C).  With ``single_key_shortcut`` and
    T = 1 the softmax over one key is replaced by its closed form.
    """
    t, n, c = ops._data(features).shape
    pos = ops.sinusoidal_embedding(np.arange(t), c)[:, None, :]
    x = ops.add(ops.add(features, geo), pos)
    x = ops.swapaxes(x, 0, 1)                                  # (n, T, C)
    h = norm(store, f"{name}.ln1", x)
    if single_key_shortcut and t == 1:
        att = dense(store, f"{name}.attn.o", dense(store, f"{name}.attn.v", h, c), c)
    else:
        att = multi_head_attention(store, f"{name}.attn", h, h, np.ones((t, t), bool), heads)
    x = ops.add(x, att)
    x = ops.add(x, feed_forward(store, f"{name}.ffn", norm(store, f"{name}.ln2", x), ffn_mult * c))
    return ops.swapaxes(x, 0, 1)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _to_tokens(x) -> Tensor:
    t, c, h, w = ops._data(x).shape
    return ops.swapaxes(ops.reshape(x, (t, c, h * w)), 1, 2)


def _to_map(x, grid) -> Tensor:
    t, n, c = ops._data(x).shape
    return ops.reshape(ops.swapaxes(x, 1, 2), (t, c) + tuple(grid))


def _head(store, name, x) -> Tensor:
    out = conv(store, name, x, 1, k=1)
    return ops.reshape(out, (out.shape[0],) + out.shape[2:])


def _fuse_skip(store, name, x, skip, width) -> Tensor:
    if ops._data(skip).shape[-2:] != ops._data(x).shape[-2:]:
        raise ValueError(f"{name}: skip {ops._data(skip).shape} does not match {ops._data(x).shape}")
    s = conv(store, f"{name}.skip", skip, width, k=1)
    return ops.silu(conv(store, f"{name}.fuse", ops.concat([x, s], axis=1), width))


def decode(tokens, grid: tuple[int, int], skips: Sequence, views: Sequence[CameraView],
           store: ParamStore, scene_scale: float, cfg: DecoderConfig = DecoderConfig(),
           single_key_shortcut: bool = False, prefix: str = "dec") -> LogitMap:
    """Fused tokens (T, n, D) on the 1/16 grid -> logits at 1/1, 1/2, 1/4, 1/8.

    ``skips`` are (T, C, H/8, W/8) and (T, C, H/4, W/4) extractor features.
    """
    t, n, d = ops._data(tokens).shape
    gh, gw = grid
    if gh * gw != n:
        raise ValueError(f"grid {grid} does not hold {n} tokens")
    if len(views) != t:
        raise ValueError(f"{len(views)} views for {t} frames")
    skip8, skip4 = skips
    c8, c4, c2, c1 = cfg.widths
    x = tokens
    if cfg.temporal:
        geo = geo_embed(views, grid, 16, store, d, scene_scale, cfg.bands, f"{prefix}.geo16")
        x = temporal_layer(x, geo, store, f"{prefix}.tmp16", cfg.heads, cfg.ffn_mult, single_key_shortcut)
    x = _to_map(x, grid)
    x = ops.depth_to_space(conv(store, f"{prefix}.up8", x, 4 * c8), 2)
    x = _fuse_skip(store, f"{prefix}.s8", x, skip8, c8)
    if cfg.temporal:
        g8 = (2 * gh, 2 * gw)
        geo = geo_embed(views, g8, 8, store, c8, scene_scale, cfg.bands, f"{prefix}.geo8")
        x = _to_map(temporal_layer(_to_tokens(x), geo, store, f"{prefix}.tmp8", cfg.heads,
                                   cfg.ffn_mult, single_key_shortcut), g8)
    l8 = _head(store, f"{prefix}.head8", x)
    x = ops.depth_to_space(conv(store, f"{prefix}.up4", x, 4 * c4), 2)
    x = _fuse_skip(store, f"{prefix}.s4", x, skip4, c4)
    l4 = _head(store, f"{prefix}.head4", x)
    x = ops.silu(conv(store, f"{prefix}.up2", ops.upsample_nearest(x, 2), c2))
    l2 = _head(store, f"{prefix}.head2", x)
    x = ops.silu(conv(store, f"{prefix}.up1", ops.upsample_nearest(x, 2), c1))
    l1 = _head(store, f"{prefix}.head1", x)
    return LogitMap(l1, [l1, l2, l4, l8])


def recover_depth(x, d_min: float, d_max: float):
    """``exp(log d_min + log(d_max / d_min) · sigmoid(x))`` for arrays or tensors."""
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    lo, span = math.log(d_min), math.log(d_max / d_min)
    if isinstance(x, Tensor):
        return ops.exp(ops.add(ops.mul(ops.sigmoid(x), span), lo))
    return np.exp(lo + span * expit(np.asarray(x, dtype=np.float64)))
