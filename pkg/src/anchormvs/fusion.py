"""Triple-cue fusion of cost-volume, monocular and metric tokens.

Each block refines the three streams with their own residual self-attention,
merges cost-volume and monocular tokens by addition, lets the merged tokens
query nearby valid metric tokens, and ends with a second self-attention unit
per stream.  Tokens are laid out (T, n, D) with n cells of the 1/16 grid in
row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import ParamStore, Tensor, conv, dense, feed_forward, multi_head_attention, norm, ops
from .cost_volume import CostVolume, image_tensor
from .geometry import GeometryError


@dataclass
class FusionConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_hidden: int = 128
    spatial_radius: int = 2
    temporal_radius: int = 1
    ffn: bool = True
    mono_channels: tuple[int, int, int, int] = (8, 16, 32, 64)


@dataclass
class CueTokens:
    """Three aligned token streams of shape (T, n, D).

    Metric rows whose mask is false are ignored everywhere; blocks keep
    them at zero on output.
    """
    cv: Tensor
    mono: Tensor
    metric: Tensor
    metric_mask: np.ndarray       # (T, n)
    grid: tuple[int, int]

    def __post_init__(self):
        shapes = {ops._data(x).shape for x in (self.cv, self.mono, self.metric)}
        if len(shapes) != 1:
            raise ValueError(f"cue streams disagree in shape: {sorted(shapes)}")
        t, n, _ = shapes.pop()
        self.metric_mask = np.asarray(self.metric_mask, dtype=bool).reshape(t, n)
        if self.grid[0] * self.grid[1] != n:
            raise ValueError(f"grid {self.grid} does not hold {n} tokens")

    @property
    def frames(self) -> int:
        return ops._data(self.cv).shape[0]


# ---------------------------------------------------------------------------
# tokenizers
# ---------------------------------------------------------------------------

def _flatten_tokens(x) -> Tensor:
    """(B, C, h, w) -> (B, h·w, C)."""
    b, c, h, w = ops._data(x).shape
    return ops.swapaxes(ops.reshape(x, (b, c, h * w)), 1, 2)


def patchify_cost_volume(volumes, store: ParamStore, dim: int = 64, prefix: str = "cvp") -> Tensor:
    """Anchored volumes (T, 𝒟, h, w) or a list of CostVolume -> (T, n, dim) tokens.

    The planes act as channels of a bias-free 4×4, stride-4 convolution, so a
    zero volume maps to zero tokens.
    """
    if isinstance(volumes, CostVolume):
        volumes = [volumes]
    if isinstance(volumes, (list, tuple)):
        volumes = ops.stack([v.anchored if isinstance(v, CostVolume) else v for v in volumes], axis=0)
    _, _, h, w = ops._data(volumes).shape
    if h % 4 or w % 4:
        raise GeometryError(f"cost volume grid {h}x{w} not divisible by 4")
    return _flatten_tokens(conv(store, f"{prefix}.proj", volumes, dim, k=4, stride=4, bias=False))


def encode_mono(images, store: ParamStore, dim: int = 64, channels=(8, 16, 32, 64),
                prefix: str = "mono") -> Tensor:
    """Four stride-2 convolution stages to the 1/16 grid, then a 1×1 projection."""
    x = image_tensor(images)
    _, _, h, w = x.shape
    if h % 16 or w % 16:
        raise GeometryError(f"image {h}x{w} not divisible by 16")
    for i, ch in enumerate(channels):
        x = ops.silu(conv(store, f"{prefix}.s{i}", x, ch, k=3, stride=2))
    return _flatten_tokens(conv(store, f"{prefix}.proj", x, dim, k=1))


# ---------------------------------------------------------------------------
# attention units
# ---------------------------------------------------------------------------

def window_mask(grid: tuple[int, int], frames: int, metric_mask: np.ndarray,
                spatial_radius: int = 2, temporal_radius: int = 1) -> np.ndarray:
    """Key admissibility (T·n, T·n) for merged queries over metric keys.

    A key is admissible when it is valid, at most ``temporal_radius`` frames
    away and within Chebyshev distance ``spatial_radius`` on the token grid.
    """
    gh, gw = grid
    ii, jj = np.divmod(np.arange(gh * gw), gw)
    near = ((np.abs(ii[:, None] - ii[None]) <= spatial_radius)
            & (np.abs(jj[:, None] - jj[None]) <= spatial_radius))
    tt = np.arange(frames)
    close = np.abs(tt[:, None] - tt[None]) <= temporal_radius
    allowed = close[:, None, :, None] & near[None, :, None, :]           # (T, n, T, n)
    allowed = allowed & np.asarray(metric_mask, bool)[None, None]
    n = gh * gw
    return allowed.reshape(frames * n, frames * n)


def transformer_unit(store: ParamStore, name: str, x, key_mask, heads: int, ffn_hidden: int,
                     ffn: bool = True) -> Tensor:
    """Pre-norm residual self-attention (and feed-forward) over the token axis."""
    h = norm(store, f"{name}.ln1", x)
    x = ops.add(x, multi_head_attention(store, f"{name}.attn", h, h, key_mask, heads))
    if ffn:
        x = ops.add(x, feed_forward(store, f"{name}.ffn", norm(store, f"{name}.ln2", x), ffn_hidden))
    return x


def _align(store, name, x, width):
    return x if ops._data(x).shape[-1] == width else dense(store, name, x, width, bias=False)


def cross_cue_merge(store: ParamStore, name: str, cv, mono, metric, tokens: CueTokens,
                    cfg: FusionConfig) -> Tensor:
    """``Z + CA(Z, metric)`` with ``Z = cv + mono`` and windowed, masked keys."""
    t, n, d = ops._data(cv).shape
    z = ops.add(cv, _align(store, f"{name}.align", mono, d))
    zf = ops.reshape(z, (t * n, d))
    mf = ops.reshape(metric, (t * n, d))
    mask = window_mask(tokens.grid, t, tokens.metric_mask, cfg.spatial_radius, cfg.temporal_radius)
    ca = multi_head_attention(store, f"{name}.ca", norm(store, f"{name}.lnq", zf),
                              norm(store, f"{name}.lnkv", mf), mask, cfg.heads)
    return ops.reshape(ops.add(zf, ca), (t, n, d))


def _zero_invalid(x, mask):
    return ops.mul(x, np.asarray(mask, np.float64)[..., None])


def tcc_block(tokens: CueTokens, store: ParamStore, cfg: FusionConfig = FusionConfig(),
              prefix: str = "tcc.0") -> CueTokens:
    t, n, _ = ops._data(tokens.cv).shape
    full = np.ones((t, 1, n), bool)
    mmask = tokens.metric_mask[:, None, :]
    unit = lambda nm, x, m: transformer_unit(store, f"{prefix}.{nm}", x, m, cfg.heads,  # noqa: E731
                                             cfg.ffn_hidden, cfg.ffn)
    cv1 = unit("sa_cv", tokens.cv, full)
    mono1 = unit("sa_mono", tokens.mono, full)
    metric1 = _zero_invalid(unit("sa_metric", tokens.metric, mmask), tokens.metric_mask)
    fused = cross_cue_merge(store, f"{prefix}.merge", cv1, mono1, metric1, tokens, cfg)
    cv2 = unit("sa2_cv", fused, full)
    mono2 = unit("sa2_mono", mono1, full)
    metric2 = _zero_invalid(unit("sa2_metric", metric1, mmask), tokens.metric_mask)
    return replace(tokens, cv=cv2, mono=mono2, metric=metric2)


def tcc_stack(tokens: CueTokens, store: ParamStore, cfg: FusionConfig = FusionConfig(),
              layers: int | None = None, prefix: str = "tcc") -> Tensor:
    """``layers`` sequential blocks; returns the fused cost-volume stream (T, n, D)."""
    layers = cfg.layers if layers is None else layers
    if layers < 1:
        raise ValueError("need at least one fusion block")
    for i in range(layers):
        tokens = tcc_block(tokens, store, cfg, prefix=f"{prefix}.{i}")
    return tokens.cv


def metric_stream(metric_tokens: Sequence, dim: int) -> tuple[Tensor, np.ndarray]:
    """Stack per-frame (n, D) metric tokens and their masks into (T, n, D), (T, n)."""
    toks = ops.stack([m.tokens for m in metric_tokens], axis=0)
    mask = np.stack([np.asarray(m.token_mask, bool) for m in metric_tokens])
    if ops._data(toks).shape[-1] != dim:
        raise ValueError(f"metric tokens have width {ops._data(toks).shape[-1]}, expected {dim}")
    return toks, mask
