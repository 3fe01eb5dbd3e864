"""Registered finite-difference gradient checks.

Each entry builds a small double-precision instance of one kernel or block
and compares its analytic gradient with central differences.  Elementwise
and linear kernels are held to 1e-6, attention to 1e-5 and composed blocks
to 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import GradCheckReport, ParamStore, Tensor, grad_check, multi_head_attention, ops
from .geometry import CameraView, Intrinsics, Pose, make_hypotheses

ELEMENTWISE_TOL = 1e-6
ATTENTION_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    run: Callable[[float], GradCheckReport]


def _rand(shape, seed, scale=1.0, shift=0.0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape) * scale + shift)


def _unary(fn, shift=0.0):
    def run(tol):
        x = _rand((3, 4), 1, shift=shift)
        return grad_check(lambda: fn(x), [x], tol)
    return run


def _binary(fn, shift=0.0):
    def run(tol):
        a, b = _rand((3, 4), 1), _rand((4,), 2, shift=shift)
        return grad_check(lambda: fn(a, b), [a, b], tol)
    return run


def _linear(tol):
    x, w, b = _rand((5, 3), 1), _rand((3, 4), 2), _rand((4,), 3)
    return grad_check(lambda: ops.linear(x, w, b), [x, w, b], tol)


def _linear_silu(tol):
    x, w, b = _rand((5, 3), 1), _rand((3, 4), 2), _rand((4,), 3)
    return grad_check(lambda: ops.linear_silu(x, w, b), [x, w, b], tol)


def _matmul(tol):
    a, b = _rand((2, 3, 4), 1), _rand((2, 4, 2), 2)
    return grad_check(lambda: ops.matmul(a, b), [a, b], tol)


def _layer_norm(tol):
    x, g, b = _rand((4, 6), 1), _rand((6,), 2, shift=1.0), _rand((6,), 3)
    return grad_check(lambda: ops.layer_norm(x, g, b), [x, g, b], tol)


def _masked_softmax(tol):
    x = _rand((4, 5), 1)
    mask = np.random.default_rng(2).random((4, 5)) < 0.6
    mask[:, 0] = True
    mask[3] = False
    return grad_check(lambda: ops.masked_softmax(x, mask), [x], tol)


def _conv(stride, k):
    def run(tol):
        x, w, b = _rand((2, 3, 6, 6), 1), _rand((4, 3, k, k), 2, 0.3), _rand((4,), 3)
        pad = (k - 1) // 2 if k % 2 else 0
        return grad_check(lambda: ops.conv2d(x, w, b, stride=stride, padding=pad), [x, w, b], tol)
    return run


def _bilinear(tol):
    grid = _rand((2, 5, 6), 1)
    coords = np.random.default_rng(2).uniform(-0.5, 6.0, (20, 2))
    return grad_check(lambda: ops.bilinear_sample(grid, coords)[0], [grid], tol)


def _reshape_ops(tol):
    x = _rand((2, 4, 4, 3), 1)
    fn = lambda: ops.depth_to_space(ops.upsample_nearest(ops.avg_pool2d(  # noqa: E731
        ops.swapaxes(x, 1, 3), 2), 2), 1)
    return grad_check(fn, [x], tol)


def _masked_max_pool(tol):
    x = _rand((2, 3, 4, 4), 1)
    mask = np.random.default_rng(2).random((2, 1, 4, 4)) < 0.5
    return grad_check(lambda: ops.masked_max_pool(x, mask)[0], [x], tol)


def _attention(tol):
    store = ParamStore(0)
    q, kv = _rand((2, 3, 8), 1), _rand((2, 5, 8), 2)
    mask = np.random.default_rng(3).random((2, 3, 5)) < 0.6
    mask[:, :, 0] = True
    fn = lambda: multi_head_attention(store, "mha", q, kv, mask, 2)  # noqa: E731
    fn()
    return grad_check(fn, [q, kv] + [p for _, p in store.items()], tol)


def _pacv_head(tol):
    from .cost_volume import CostVolumeConfig, anchor_costs
    hyp = make_hypotheses(1.0, 10.0, 3)
    meta = _rand((3, 2, 4, 18), 1)
    absin = np.random.default_rng(2).standard_normal((3, 2, 4, 4))
    cfg = CostVolumeConfig(rel_feature_dim=4, abs_feature_dim=4, rel_hidden=6, abs_hidden=5, head_hidden=6)
    store = ParamStore(0)
    fn = lambda: anchor_costs(meta, absin, store, hyp, cfg).anchored  # noqa: E731
    fn()
    return grad_check(fn, [meta] + [p for _, p in store.items()], tol, max_entries=12)


def _tcc_block(tol):
    from .fusion import CueTokens, FusionConfig, tcc_block
    rng = np.random.default_rng(3)
    t, grid, d = 2, (2, 2), 8
    mask = rng.random((t, 4)) < 0.6
    tok = CueTokens(_rand((t, 4, d), 1), _rand((t, 4, d), 2), Tensor(rng.standard_normal((t, 4, d)) * mask[..., None]),
                    mask, grid)
    cfg = FusionConfig(dim=d, heads=2, ffn_hidden=8)
    store = ParamStore(0)
    fn = lambda: tcc_block(tok, store, cfg).cv  # noqa: E731
    fn()
    return grad_check(fn, [tok.cv, tok.mono, tok.metric] + [p for _, p in store.items()], tol, max_entries=6)


def _temporal_layer(tol):
    from .decoder import temporal_layer
    x, g = _rand((3, 4, 8), 1), _rand((3, 4, 8), 2, 0.1)
    store = ParamStore(0)
    fn = lambda: temporal_layer(x, g, store, "tl", heads=2)  # noqa: E731
    fn()
    return grad_check(fn, [x, g] + [p for _, p in store.items()], tol, max_entries=8)


def _decoder(tol):
    from .decoder import DecoderConfig, decode
    intr = Intrinsics(28.0, 28.0, 16.0, 16.0, 32, 32)
    views = [CameraView(intr, Pose(np.eye(3), np.array([0.2 * i, 0.0, 0.0])), np.zeros((32, 32, 3)), i)
             for i in range(2)]
    toks = _rand((2, 4, 8), 1)
    skips = [_rand((2, 4, 4, 4), 2), _rand((2, 4, 8, 8), 3)]
    cfg = DecoderConfig(widths=(8, 8, 4, 4), heads=2)
    store = ParamStore(0)
    fn = lambda: decode(toks, (2, 2), skips, views, store, 20.0, cfg).x  # noqa: E731
    fn()
    return grad_check(fn, [toks] + skips + [p for _, p in store.items()], tol, max_entries=4)


def _total_loss(tol):
    from .objectives import compute_losses
    rng = np.random.default_rng(0)
    gt = rng.uniform(2.0, 6.0, (2, 16, 16))
    gt[1] = gt[0] + rng.normal(0.0, 0.02, (16, 16))
    valid = rng.random((2, 16, 16)) < 0.9
    preds = [Tensor(rng.uniform(2.0, 6.0, (2, 16 // s, 16 // s))) for s in (1, 2, 4, 8)]
    intr = Intrinsics(14.0, 14.0, 8.0, 8.0, 16, 16)
    return grad_check(lambda: compute_losses(preds, gt, valid, intr).total, preds, tol, max_entries=40)


CHECKS: list[Check] = [
    Check("add", ELEMENTWISE_TOL, _binary(ops.add)),
    Check("sub", ELEMENTWISE_TOL, _binary(ops.sub)),
    Check("mul", ELEMENTWISE_TOL, _binary(ops.mul)),
    Check("div", ELEMENTWISE_TOL, _binary(ops.div, shift=3.0)),
    Check("exp", ELEMENTWISE_TOL, _unary(ops.exp)),
    Check("log", ELEMENTWISE_TOL, _unary(ops.log, shift=5.0)),
    Check("sqrt", ELEMENTWISE_TOL, _unary(ops.sqrt, shift=5.0)),
    Check("square", ELEMENTWISE_TOL, _unary(ops.square)),
    Check("sigmoid", ELEMENTWISE_TOL, _unary(ops.sigmoid)),
    Check("tanh", ELEMENTWISE_TOL, _unary(ops.tanh)),
    Check("silu", ELEMENTWISE_TOL, _unary(ops.silu)),
    Check("linear", ELEMENTWISE_TOL, _linear),
    Check("linear_silu", ELEMENTWISE_TOL, _linear_silu),
    Check("matmul", ELEMENTWISE_TOL, _matmul),
    Check("layer_norm", ELEMENTWISE_TOL, _layer_norm),
    Check("masked_softmax", ELEMENTWISE_TOL, _masked_softmax),
    Check("conv3x3", ELEMENTWISE_TOL, _conv(1, 3)),
    Check("conv3x3_stride2", ELEMENTWISE_TOL, _conv(2, 3)),
    Check("conv1x1", ELEMENTWISE_TOL, _conv(1, 1)),
    Check("conv4x4_stride4", ELEMENTWISE_TOL, _conv(4, 4)),
    Check("bilinear_sample", ELEMENTWISE_TOL, _bilinear),
    Check("resampling", ELEMENTWISE_TOL, _reshape_ops),
    Check("masked_max_pool", ELEMENTWISE_TOL, _masked_max_pool),
    Check("multi_head_attention", ATTENTION_TOL, _attention),
    Check("pacv_head", BLOCK_TOL, _pacv_head),
    Check("tcc_block", BLOCK_TOL, _tcc_block),
    Check("temporal_layer", BLOCK_TOL, _temporal_layer),
    Check("decoder_32x32", BLOCK_TOL, _decoder),
    Check("total_loss", BLOCK_TOL, _total_loss),
]


def run_checks(names=None) -> list[tuple[Check, GradCheckReport]]:
    """Run the selected (default: all) checks in registration order."""
    known = {c.name: c for c in CHECKS}
    if names:
        unknown = [n for n in names if n not in known]
        if unknown:
            raise KeyError(f"unknown gradient checks {unknown}; known: {sorted(known)}")
        selected = [known[n] for n in names]
    else:
        selected = CHECKS
    out = []
    for c in selected:
        report = c.run(c.tolerance)
        report.name = c.name
        out.append((c, report))
    return out
