"""Layers used by the tokenizer and the autoregressive transformer.

Functional forms (``conv2d``, ``group_norm``, ...) take explicit parameter
tensors; the ``Module`` subclasses own their parameters and expose them
through :meth:`Module.named_parameters`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GN_EPS = 1e-6
RMS_EPS = 1e-6
ROPE_BASE = 10000.0


# -- parameter containers -----------------------------------------------------

class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules.  Names follow attribute order.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"load_state_dict[{name}]", arr.shape, p.shape)
            p.data = np.array(arr, dtype=p.dtype)
            p.zero_grad()

    def train(self, mode: bool = True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._modules()


class Init:
    """Parameter factory.

    ``meta=True`` builds zero-stride placeholders so full-scale shapes can be
    constructed and counted without allocating their memory.
    """

    def __init__(self, rng: np.random.Generator | int | None = 0, dtype=np.float64, meta: bool = False):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.dtype = np.dtype(dtype)
        self.meta = meta

    def _wrap(self, arr) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = True
        t.grad = None if self.meta else np.zeros_like(arr)
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        t.name = None
        return t

    def normal(self, shape, std: float) -> Tensor:
        if self.meta:
            return self._wrap(np.broadcast_to(np.zeros((), self.dtype), shape))
        return self._wrap((self.rng.standard_normal(shape) * std).astype(self.dtype))

    def zeros(self, shape) -> Tensor:
        if self.meta:
            return self._wrap(np.broadcast_to(np.zeros((), self.dtype), shape))
        return self._wrap(np.zeros(shape, self.dtype))

    def ones(self, shape) -> Tensor:
        if self.meta:
            return self._wrap(np.broadcast_to(np.ones((), self.dtype), shape))
        return self._wrap(np.ones(shape, self.dtype))


# -- activations ----------------------------------------------------------------

def silu(x: Tensor) -> Tensor:
    return x * ad.sigmoid(x)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


# -- linear / embedding ---------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: Init, bias: bool = True, std: float | None = None):
        self.weight = init.normal((d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in))
        self.bias = init.zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, dim: int, init: Init, std: float = 0.02):
        self.weight = init.normal((n, dim), std)

    def __call__(self, idx) -> Tensor:
        return ad.embedding(self.weight, idx)


# -- convolution --------------------------------------------------------------

def _out_extent(n: int, stride: int) -> int:
    return -(-n // stride)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero same-padding.

    ``x`` is [B, C, H, W], ``weight`` is [outC, C, kH, kW] with odd kernel
    extents.  Output spatial extents are ceil(H / stride), ceil(W / stride).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape)
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    ph, pw = kh // 2, kw // 2
    Ho, Wo = _out_extent(H, stride), _out_extent(W, stride)
    xv, wv = x.data, weight.data
    # im2col buffer laid out [B, C*kh*kw, Ho*Wo] so the product is already NCHW
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xv[:, :, ::stride, ::stride]).reshape(B, C, Ho * Wo)
    else:
        # extra far-side padding keeps every strided window in bounds
        xp = np.zeros((B, C, H + 2 * ph + stride, W + 2 * pw + stride), dtype=xv.dtype)
        xp[:, :, ph:ph + H, pw:pw + W] = xv
        cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    wm = wv.reshape(O, C * kh * kw)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            if kh == 1 and kw == 1:
                gx = np.zeros(xv.shape, dtype=xv.dtype)
                gx[:, :, ::stride, ::stride] = dcols.reshape(B, C, Ho, Wo)
            else:
                dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
                gp = np.zeros((B, C, H + 2 * ph + stride, W + 2 * pw + stride), dtype=xv.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
                gx = gp[:, :, ph:ph + H, pw:pw + W].copy()
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return ad._make(out, parents, backward, "conv2d")


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor | None
    stride: int = 1


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, init: Init, stride: int = 1):
        fan_in = c_in * kernel * kernel
        self.weight = init.normal((c_out, c_in, kernel, kernel), 1.0 / math.sqrt(fan_in))
        self.bias = init.zeros((c_out,))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


# -- pixel shuffle ---------------------------------------------------------------

def depth_to_space(x: Tensor, r: int) -> Tensor:
    """[B, C*r*r, H, W] -> [B, C, H*r, W*r]; channel c*r*r + i*r + j lands at (i, j)."""
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ShapeError("depth_to_space", x.shape, (r, r))
    C = Cr // (r * r)
    y = ad.reshape(x, (B, C, r, r, H, W))
    y = ad.transpose(y, (0, 1, 4, 2, 5, 3))
    return ad.reshape(y, (B, C, H * r, W * r))


def space_to_depth(x: Tensor, r: int) -> Tensor:
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ShapeError("space_to_depth", x.shape, (r, r))
    H, W = Hr // r, Wr // r
    y = ad.reshape(x, (B, C, H, r, W, r))
    y = ad.transpose(y, (0, 1, 3, 5, 2, 4))
    return ad.reshape(y, (B, C * r * r, H, W))


# -- normalisation ---------------------------------------------------------------

def group_norm_standardize(x: Tensor, groups: int) -> Tensor:
    """Per (sample, group) zero-mean unit-variance map, before any affine."""
    B, C = x.shape[:2]
    if C % groups:
        raise ShapeError("group_norm", x.shape, (groups,))
    g = ad.reshape(x, (B, groups, -1))
    mu = ad.mean(g, axis=2, keepdims=True)
    centered = g - mu
    var = ad.mean(centered * centered, axis=2, keepdims=True)
    normed = centered * ad.power(var + GN_EPS, -0.5)
    return ad.reshape(normed, x.shape)


def _channel_view(p: Tensor, ndim: int) -> Tensor:
    return ad.reshape(p, (1, -1) + (1,) * (ndim - 2))


def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor) -> Tensor:
    xh = group_norm_standardize(x, groups)
    return xh * _channel_view(scale, x.ndim) + _channel_view(shift, x.ndim)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, init: Init):
        self.scale = init.ones((channels,))
        self.shift = init.zeros((channels,))
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.scale, self.shift)


def adaptive_group_norm(x: Tensor, quant: Tensor, proj: Linear, groups: int) -> Tensor:
    """Group norm modulated by the spatially averaged code map.

    ``proj`` maps the K-dim average to 2C values split into (s, b); the
    output is (1 + s) * x_hat + b with x_hat the plain group norm of ``x``.
    """
    B, C = x.shape[:2]
    if quant.shape[0] != B:
        raise ShapeError("adaptive_group_norm", x.shape, quant.shape)
    pooled = ad.mean(quant, axis=(2, 3))
    sb = proj(pooled)
    s = ad.reshape(sb[:, :C], (B, C, 1, 1))
    b = ad.reshape(sb[:, C:], (B, C, 1, 1))
    xh = group_norm_standardize(x, groups)
    return xh * (s + 1.0) + b


class AdaptiveGroupNorm(Module):
    def __init__(self, channels: int, cond_dim: int, groups: int, init: Init):
        self.proj = Linear(cond_dim, 2 * channels, init, std=0.0)
        self.groups = groups

    def __call__(self, x: Tensor, quant: Tensor) -> Tensor:
        return adaptive_group_norm(x, quant, self.proj, self.groups)


def rms_norm(x: Tensor, scale: Tensor) -> Tensor:
    ms = ad.mean(x * x, axis=-1, keepdims=True)
    return x * ad.power(ms + RMS_EPS, -0.5) * scale


class RMSNorm(Module):
    def __init__(self, dim: int, init: Init):
        self.scale = init.ones((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.scale)


# -- rotary positions -------------------------------------------------------------

def rotary_tables(positions, d_head: int, base: float = ROPE_BASE, dtype=np.float64):
    if d_head % 2:
        raise ValueError(f"rotary: head dimension must be even, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = pos[..., None] * freqs
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rotary(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotate adjacent feature pairs (2j, 2j+1) by ``position * base**(-2j/d)``.

    ``x`` is [..., T, d]; ``positions`` holds one integer per slot along T.
    """
    d = x.shape[-1]
    cos, sin = rotary_tables(positions, d, base, x.dtype)
    pairs = ad.reshape(x, x.shape[:-1] + (d // 2, 2))
    even = pairs[..., 0]
    odd = pairs[..., 1]
    cos_t, sin_t = Tensor(cos), Tensor(sin)
    new_even = even * cos_t - odd * sin_t
    new_odd = even * sin_t + odd * cos_t
    stacked = ad.concatenate(
        [ad.reshape(new_even, new_even.shape + (1,)), ad.reshape(new_odd, new_odd.shape + (1,))], axis=-1
    )
    return ad.reshape(stacked, x.shape)


# -- attention ---------------------------------------------------------------------

class KVCache:
    """Per-layer key/value history for incremental decoding."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers

    @property
    def length(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[2]


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int


class CausalSelfAttention(Module):
    def __init__(self, width: int, heads: int, init: Init):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        std = 1.0 / math.sqrt(width)
        self.wq = init.normal((width, width), std)
        self.wk = init.normal((width, width), std)
        self.wv = init.normal((width, width), std)
        self.wo = init.normal((width, width), std)
        self.heads = heads

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.wq, self.wk, self.wv, self.wo, self.heads)

    def __call__(self, x, cache=None, layer=0, rotary=True):
        return causal_self_attention(x, self.params, cache=cache, layer=layer, rotary=rotary)


def causal_self_attention(
    x: Tensor,
    p: AttentionParams,
    cache: KVCache | None = None,
    layer: int = 0,
    rotary: bool = True,
) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    With ``cache`` the inputs are treated as the next positions after the
    cached ones; keys and values are appended to the cache.
    """
    B, T, w = x.shape
    h = p.heads
    dh = w // h
    start = cache.length if cache is not None else 0

    def heads_first(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

    q = heads_first(x @ p.wq)
    k = heads_first(x @ p.wk)
    v = heads_first(x @ p.wv)
    if rotary:
        positions = np.arange(start, start + T)
        q = apply_rotary(q, positions)
        k = apply_rotary(k, positions)
    if cache is not None:
        if cache.keys[layer] is not None:
            k = Tensor(np.concatenate([cache.keys[layer], k.data], axis=2))
            v = Tensor(np.concatenate([cache.values[layer], v.data], axis=2))
        cache.keys[layer] = k.data
        cache.values[layer] = v.data
    S = k.shape[2]
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mask = np.arange(S)[None, :] <= (np.arange(start, start + T)[:, None])
    attn = ad.softmax(scores, mask=mask)
    y = attn @ v
    y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (B, T, w))
    return y @ p.wo


# -- feed-forward ------------------------------------------------------------------

def ffn_hidden(width: int, multiplier: float) -> int:
    return max(1, int(round(width * multiplier)))


class GatedFFN(Module):
    """down(silu(x @ up_gate) * (x @ up_value))."""

    def __init__(self, width: int, multiplier: float, init: Init):
        hidden = ffn_hidden(width, multiplier)
        self.w_gate = init.normal((width, hidden), 1.0 / math.sqrt(width))
        self.w_up = init.normal((width, hidden), 1.0 / math.sqrt(width))
        self.w_down = init.normal((hidden, width), 1.0 / math.sqrt(hidden))

    def __call__(self, x: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        return gated_ffn(x, self.w_gate, self.w_up, self.w_down, rng=rng, rate=rate)


def gated_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor, rng=None, rate: float = 0.0) -> Tensor:
    hidden = silu(x @ w_gate) * (x @ w_up)
    return dropout(hidden, rate, rng) @ w_down


class TransformerBlock(Module):
    """Pre-norm block: attention then gated feed-forward, both residual."""

    def __init__(self, width: int, heads: int, ffn_mult: float, init: Init):
        self.attn_norm = RMSNorm(width, init)
        self.attn = CausalSelfAttention(width, heads, init)
        self.ffn_norm = RMSNorm(width, init)
        self.ffn = GatedFFN(width, ffn_mult, init)

    def __call__(self, x, cache=None, layer=0, rng=None, dropout_rate=0.0):
        x = x + self.attn(self.attn_norm(x), cache=cache, layer=layer)
        return x + self.ffn(self.ffn_norm(x), rng=rng, rate=dropout_rate)
