"""Named, seeded parameter storage and the layers built on it."""

from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def _name_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class ParamStore:
    """Lazily created named parameters.

    Each parameter draws from its own Philox stream keyed on ``(seed, name)``,
    so creation order never changes values.  Weights are uniform in
    ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; biases start at zero.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}
        self._frozen = False

    def get(self, name: str, shape: tuple[int, ...], init: str = "uniform",
            fan_in: int | None = None) -> Tensor:
        p = self._params.get(name)
        if p is not None:
            if p.shape != tuple(shape):
                raise ValueError(f"parameter {name!r} has shape {p.shape}, requested {tuple(shape)}")
            return p
        if self._frozen:
            raise KeyError(f"unknown parameter {name!r} in a frozen store")
        self._params[name] = p = Tensor(self._init(name, tuple(shape), init, fan_in),
                                        requires_grad=True, name=name)
        return p

    def _init(self, name, shape, init, fan_in) -> np.ndarray:
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        if init != "uniform":
            raise ValueError(f"unknown init {init!r}")
        fan_in = fan_in if fan_in is not None else shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        rng = np.random.Generator(np.random.Philox(key=_name_key(self.seed, name)))
        return rng.uniform(-bound, bound, size=shape)

    def freeze(self) -> None:
        self._frozen = True

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(sorted(self._params.items()))

    def names(self) -> list[str]:
        return sorted(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if name in self._params:
                if self._params[name].shape != value.shape:
                    raise ValueError(f"checkpoint shape {value.shape} for {name!r} "
                                     f"!= {self._params[name].shape}")
                self._params[name].data = value.copy()
            else:
                self._params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(store: ParamStore, name: str, x, out_dim: int, bias: bool = True) -> Tensor:
    in_dim = ops._data(x).shape[-1]
    w = store.get(f"{name}.w", (in_dim, out_dim), fan_in=in_dim)
    b = store.get(f"{name}.b", (out_dim,), init="zeros") if bias else None
    return ops.linear(x, w, b)


def mlp(store: ParamStore, name: str, x, widths: list[int], final_activation: bool = False) -> Tensor:
    """Stack of dense layers with SiLU between them."""
    for i, width in enumerate(widths):
        if i < len(widths) - 1 or final_activation:
            in_dim = ops._data(x).shape[-1]
            w = store.get(f"{name}.{i}.w", (in_dim, width), fan_in=in_dim)
            x = ops.linear_silu(x, w, store.get(f"{name}.{i}.b", (width,), init="zeros"))
        else:
            x = dense(store, f"{name}.{i}", x, width)
    return x


def norm(store: ParamStore, name: str, x) -> Tensor:
    d = ops._data(x).shape[-1]
    return ops.layer_norm(x, store.get(f"{name}.g", (d,), init="ones"),
                          store.get(f"{name}.b", (d,), init="zeros"))


def conv(store: ParamStore, name: str, x, out_ch: int, k: int = 3, stride: int = 1,
         bias: bool = True, padding: int | None = None) -> Tensor:
    """NCHW convolution; odd kernels are "same"-padded, even kernels unpadded."""
    in_ch = ops._data(x).shape[1]
    fan_in = in_ch * k * k
    w = store.get(f"{name}.w", (out_ch, in_ch, k, k), fan_in=fan_in)
    b = store.get(f"{name}.b", (out_ch,), init="zeros") if bias else None
    if padding is None:
        padding = (k - 1) // 2 if k % 2 else 0
    return ops.conv2d(x, w, b, stride=stride, padding=padding)


def multi_head_attention(store: ParamStore, name: str, q_in, kv_in, key_mask, heads: int) -> Tensor:
    """Scaled dot-product attention with per-head splitting.

    ``q_in`` is (..., Lq, D), ``kv_in`` (..., Lk, D) and ``key_mask`` a boolean
    array broadcastable to (..., Lq, Lk).  Query rows with no admissible key
    return the zero vector (after the output projection).
    """
    dq = ops._data(q_in)
    d = dq.shape[-1]
    if d % heads:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = dense(store, f"{name}.q", q_in, d)
    k = dense(store, f"{name}.k", kv_in, d)
    v = dense(store, f"{name}.v", kv_in, d)

    def split(t):
        *lead, length, _ = t.shape
        t = ops.reshape(t, (*lead, length, heads, dh))
        return ops.swapaxes(t, -2, -3)  # (..., heads, L, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = ops.mul(ops.matmul(qh, ops.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    lq, lk = dq.shape[-2], ops._data(kv_in).shape[-2]
    mask = np.asarray(key_mask, dtype=bool)
    lead = scores.shape[:-3]
    mask = np.broadcast_to(mask, lead + (lq, lk))
    attn = ops.masked_softmax(scores, mask[..., None, :, :])
    ctx = ops.matmul(attn, vh)
    ctx = ops.swapaxes(ctx, -2, -3)
    ctx = ops.reshape(ctx, (*lead, lq, d))
    out = dense(store, f"{name}.o", ctx, d)
    has_key = mask.any(axis=-1)
    if not has_key.all():
        out = ops.mul(out, has_key[..., None].astype(np.float64))
    return out


def feed_forward(store: ParamStore, name: str, x, hidden: int) -> Tensor:
    d = ops._data(x).shape[-1]
    return dense(store, f"{name}.2", ops.silu(dense(store, f"{name}.1", x, hidden)), d)
