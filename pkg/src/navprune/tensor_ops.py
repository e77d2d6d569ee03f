"""Dense float32 tensor operations for the segmentation transformer.

Every function here is a pure, deterministic map from float32 numpy arrays
to float32 numpy arrays. Dot products accumulate in float64 before the
result is cast back, which keeps the activation statistics consumed by the
pruner stable across shape changes. There is no autodiff and no batching
beyond the leading axes the individual contracts allow.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError

Array = np.ndarray


def as_f32(x) -> Array:
    """Coerce to a contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


def conv2d(inp: Array, weight: Array, bias: Array, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Array:
    """Cross-correlate a [C_in,H,W] input with [C_out,C_in/groups,kH,kW] filters.

    Output spatial size follows floor((H + 2*padding - kH)/stride) + 1.
    """
    inp = as_f32(inp)
    weight = as_f32(weight)
    bias = as_f32(bias)
    _require(inp.ndim == 3, f"conv2d input must be rank 3, got shape {inp.shape}")
    _require(weight.ndim == 4, f"conv2d weight must be rank 4, got shape {weight.shape}")
    c_in, h, w = inp.shape
    c_out, c_in_g, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise DimensionError(
            f"conv2d groups={groups} must divide C_in={c_in} and C_out={c_out}")
    _require(c_in_g == c_in // groups,
             f"conv2d weight axis 1 is {c_in_g}, expected C_in/groups = {c_in // groups}")
    _require(bias.shape == (c_out,),
             f"conv2d bias axis 0 is {bias.shape}, expected ({c_out},)")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    _require(out_h >= 1 and out_w >= 1,
             f"conv2d kernel {kh}x{kw} does not fit padded input {h}x{w}")

    padded = np.pad(inp, ((0, 0), (padding, padding), (padding, padding)))
    # [C_in, out_h, out_w, kh, kw] windows, subsampled by stride.
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.empty((c_out, out_h, out_w), dtype=np.float32)
    cpg_in = c_in // groups
    cpg_out = c_out // groups
    for g in range(groups):
        cols = win[g * cpg_in:(g + 1) * cpg_in].transpose(1, 2, 0, 3, 4)
        cols = cols.reshape(out_h * out_w, cpg_in * kh * kw).astype(np.float64)
        wmat = weight[g * cpg_out:(g + 1) * cpg_out].reshape(cpg_out, -1).astype(np.float64)
        acc = cols @ wmat.T + bias[g * cpg_out:(g + 1) * cpg_out].astype(np.float64)
        out[g * cpg_out:(g + 1) * cpg_out] = (
            acc.T.reshape(cpg_out, out_h, out_w).astype(np.float32))
    return out


def linear(inp: Array, weight: Array, bias: Array) -> Array:
    """Affine map over the last axis: out[..., j] = sum_i inp[..., i] * weight[j, i] + bias[j]."""
    inp = as_f32(inp)
    weight = as_f32(weight)
    bias = as_f32(bias)
    _require(weight.ndim == 2, f"linear weight must be rank 2, got shape {weight.shape}")
    d_out, d_in = weight.shape
    _require(inp.shape[-1] == d_in,
             f"linear input last axis is {inp.shape[-1]}, expected D_in = {d_in}")
    _require(bias.shape == (d_out,),
             f"linear bias axis 0 is {bias.shape}, expected ({d_out},)")
    lead = inp.shape[:-1]
    flat = inp.reshape(-1, d_in).astype(np.float64)
    out = flat @ weight.T.astype(np.float64) + bias.astype(np.float64)
    return out.astype(np.float32).reshape(*lead, d_out)


def layer_norm(inp: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be > 0, got {eps}")
    inp = as_f32(inp)
    gamma = as_f32(gamma)
    beta = as_f32(beta)
    d = inp.shape[-1]
    _require(d >= 1, "layer_norm needs a nonempty last axis")
    _require(gamma.shape == (d,) and beta.shape == (d,),
             f"layer_norm gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    x = inp.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + eps) * gamma + beta
    return out.astype(np.float32)


def softmax(inp: Array, axis: int = -1) -> Array:
    """Numerically stable softmax; rows along `axis` sum to 1."""
    x = as_f32(inp).astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def attention(q: Array, k: Array, v: Array, heads: int) -> Array:
    """Multi-head scaled dot-product attention over [N, D] token matrices.

    q and k must share their feature width; v may differ as long as every
    width is divisible by `heads`. Heads are concatenated in order.
    """
    q, k, v = as_f32(q), as_f32(k), as_f32(v)
    _require(q.ndim == 2 and k.ndim == 2 and v.ndim == 2,
             "attention expects rank-2 [N, D] inputs")
    _require(q.shape[1] == k.shape[1],
             f"attention q width {q.shape[1]} != k width {k.shape[1]}")
    _require(k.shape[0] == v.shape[0],
             f"attention k rows {k.shape[0]} != v rows {v.shape[0]}")
    if heads < 1 or q.shape[1] % heads or v.shape[1] % heads:
        raise ConfigurationError(
            f"attention heads={heads} must divide q/k width {q.shape[1]} "
            f"and v width {v.shape[1]}")
    n = q.shape[0]
    d_qk = q.shape[1] // heads
    d_v = v.shape[1] // heads
    out = np.empty((n, heads * d_v), dtype=np.float32)
    scale = 1.0 / np.sqrt(float(d_qk))
    for h in range(heads):
        qh = q[:, h * d_qk:(h + 1) * d_qk].astype(np.float64)
        kh = k[:, h * d_qk:(h + 1) * d_qk].astype(np.float64)
        vh = v[:, h * d_v:(h + 1) * d_v].astype(np.float64)
        attn = softmax((qh @ kh.T) * scale).astype(np.float64)
        out[:, h * d_v:(h + 1) * d_v] = (attn @ vh).astype(np.float32)
    return out


def resize_bilinear(inp: Array, out_h: int, out_w: int) -> Array:
    """Bilinear resize of a [C,H,W] image, align_corners=False convention."""
    inp = as_f32(inp)
    _require(inp.ndim == 3, f"resize_bilinear input must be rank 3, got {inp.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize_bilinear output size {out_h}x{out_w} must be >= 1")
    c, h, w = inp.shape

    def axis_coords(n_in: int, n_out: int):
        scale = n_in / n_out
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    img = inp.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    return out.astype(np.float32)


def relu(inp: Array) -> Array:
    return np.maximum(as_f32(inp), np.float32(0.0))


_GELU_C = np.float64(np.sqrt(2.0 / np.pi))


def gelu(inp: Array) -> Array:
    """Gaussian error linear unit, tanh approximation."""
    x = as_f32(inp).astype(np.float64)
    out = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))
    return out.astype(np.float32)


def add(a: Array, b: Array) -> Array:
    """Elementwise sum of two identically shaped tensors (no broadcasting)."""
    a, b = as_f32(a), as_f32(b)
    _require(a.shape == b.shape, f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b
