"""Differentiable operators on (N, C, H, W) tensors.

Every operator computes its forward result with numpy and, when an input
requires a gradient and a :class:`~slsdeep.tensor.Tape` is active, records
a closure implementing the vector-Jacobian product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_output

__all__ = [
    "ConvSpec",
    "BatchNormState",
    "conv2d",
    "maxpool2d",
    "bilinear_resize",
    "bilinear_upsample",
    "adaptive_avg_pool2d",
    "batchnorm2d",
    "relu",
    "dropout",
    "dropout_mask",
    "concat_channels",
    "slice_channels",
    "softmax_channels",
    "add",
    "sub",
    "mul",
    "sqrt",
    "log",
    "sum",
    "mean",
    "forward_diff_x",
    "forward_diff_y",
    "binary_nll",
]


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# Convolution


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = True

    def __post_init__(self):
        kernel = self.kernel
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
            object.__setattr__(self, "kernel", kernel)
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be positive, got {self.out_channels}")
        if min(kernel) < 1 or self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid convolution geometry: {self}")

    def output_size(self, height: int, width: int) -> tuple:
        kh, kw = self.kernel
        ho = (height + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (width + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return ho, wo


def _tap(i: int, j: int, dilation: int, stride: int, ho: int, wo: int):
    r0, c0 = i * dilation, j * dilation
    return (
        slice(None),
        slice(None),
        slice(r0, r0 + stride * (ho - 1) + 1, stride),
        slice(c0, c0 + stride * (wo - 1) + 1, stride),
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, spec: Optional[ConvSpec] = None,
           *, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with stride, zero padding and dilation."""
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (outC, inC, kh, kw), got {weight.shape}")
    out_c, in_c, kh, kw = weight.shape
    if spec is None:
        spec = ConvSpec(out_c, (kh, kw), stride, padding, dilation, bias is not None)
    if x.shape[1] != in_c:
        raise ShapeError(f"conv2d: input channels C={x.shape[1]} != weight inC={in_c}")
    if spec.kernel != (kh, kw):
        raise ShapeError(f"conv2d: spec kernel {spec.kernel} != weight kernel {(kh, kw)}")
    if spec.out_channels != out_c:
        raise ShapeError(f"conv2d: spec out_channels={spec.out_channels} != weight outC={out_c}")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (outC={out_c},)")
    n, _, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {spec.kernel} dilation {spec.dilation}")
    s, d, p = spec.stride, spec.dilation, spec.padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data
    out = np.zeros((n, ho, wo, out_c), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            xs = xp[_tap(i, j, d, s, ho, wo)]
            out += np.tensordot(xs, wd[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
        if weight.requires_grad:
            gw = np.zeros(wd.shape, dtype=weight.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = _tap(i, j, d, s, ho, wo)
                if weight.requires_grad:
                    gw[:, :, i, j] = np.tensordot(gt, xp[sl], axes=([0, 1, 2], [0, 2, 3]))
                if x.requires_grad:
                    gxp[sl] += np.tensordot(gt, wd[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, inputs, backward, "conv2d")


# --------------------------------------------------------------------------
# Pooling and resampling


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling; backward routes each gradient to the lowest-index maximum."""
    _require_4d(x, "maxpool2d")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"maxpool2d: spatial dims must be positive, got {h}x{w}")
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input {h}x{w} too small for kernel {kernel}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    taps = [_tap(i, j, 1, stride, ho, wo) for i in range(kernel) for j in range(kernel)]
    stacked = np.stack([xp[t] for t in taps])
    # np.argmax returns the first maximum; taps are in row-major window order.
    arg = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for k, t in enumerate(taps):
            gxp[t] += np.where(arg == k, g, 0)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_output(out, (x,), backward, "maxpool2d")


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # Half-pixel centres, source coordinate clamped at the low edge.
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def _adaptive_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        start = (o * n_in) // n_out
        stop = -((-(o + 1) * n_in) // n_out)
        m[o, start:stop] = 1.0 / (stop - start)
    return m


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray, name: str) -> Tensor:
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(mh.T, np.matmul(g, mw)),)

    return make_output(out, (x,), backward, name)


def bilinear_resize(x: Tensor, size: tuple) -> Tensor:
    """Bilinear resampling to ``size`` = (H_out, W_out), half-pixel centres."""
    _require_4d(x, "bilinear_resize")
    ho, wo = size
    if ho < 1 or wo < 1:
        raise ValueError(f"bilinear_resize: target size must be positive, got {size}")
    _, _, h, w = x.shape
    if (ho, wo) == (h, w):
        return make_output(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    return _separable(x, _bilinear_matrix(h, ho, x.dtype), _bilinear_matrix(w, wo, x.dtype), "bilinear_resize")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be a positive integer, got {factor}")
    _require_4d(x, "bilinear_upsample")
    return bilinear_resize(x, (x.shape[2] * int(factor), x.shape[3] * int(factor)))


def adaptive_avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Average over ``size`` x ``size`` bins; bin edges floor/ceil like PSP pooling."""
    _require_4d(x, "adaptive_avg_pool2d")
    _, _, h, w = x.shape
    if size < 1 or size > min(h, w):
        raise ShapeError(f"adaptive_avg_pool2d: cannot pool {h}x{w} into {size}x{size} bins")
    return _separable(x, _adaptive_matrix(h, size, x.dtype), _adaptive_matrix(w, size, x.dtype),
                      "adaptive_avg_pool2d")


# --------------------------------------------------------------------------
# Normalisation, activations, regularisation


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
                update_running: bool = True) -> Tensor:
    _require_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: input has C={c} but gamma/beta have shapes {gamma.shape}/{beta.shape}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    count = n * h * w
    if training:
        if count < 2:
            raise ShapeError(f"batchnorm2d: training needs N*H*W >= 2, got {count}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mu
            state.running_var[...] = (1 - m) * state.running_var + m * var * (count / (count - 1))
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std
    out = xhat * g4 + b4

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std * (dxhat - s1 / count - xhat * s2 / count)
            else:
                gx = dxhat * inv_std
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_output(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_output(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def dropout_mask(shape: tuple, p: float, seed: int, layer_id: int, step: int) -> np.ndarray:
    """Keep-mask from a counter-based generator keyed by (seed, layer, step)."""
    key = np.random.SeedSequence([int(seed), int(layer_id), int(step)]).generate_state(2, np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.random(shape) >= p


def dropout(x: Tensor, p: float = 0.5, training: bool = True, seed: int = 0, layer_id: int = 0,
            step: int = 0) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = dropout_mask(x.shape, p, seed, layer_id, step)
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return make_output(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


# --------------------------------------------------------------------------
# Channel manipulation


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels: need at least one input")
    for t in inputs:
        _require_4d(t, "concat_channels")
    ref = inputs[0].shape
    for idx, t in enumerate(inputs[1:], start=1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels: input {idx} has N,H,W={t.shape[0]},{t.shape[2]},{t.shape[3]}, "
                f"expected {ref[0]},{ref[2]},{ref[3]} (from input 0)"
            )
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return [g[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs))]

    return make_output(out, tuple(inputs), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for C={x.shape[1]}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_output(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


def softmax_channels(x: Tensor) -> Tensor:
    _require_4d(x, "softmax_channels")
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels: need C >= 2, got C={x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_output(s, (x,), backward, "softmax_channels")


# --------------------------------------------------------------------------
# Elementwise arithmetic and reductions (same-shape or scalar operands only)


def _operand(b, like: Tensor):
    if isinstance(b, Tensor):
        if b.shape != like.shape:
            raise ShapeError(f"elementwise op: shapes {like.shape} and {b.shape} differ")
        return b
    arr = np.asarray(b, dtype=like.dtype)
    if arr.ndim and arr.shape != like.shape:
        raise ShapeError(f"elementwise op: shapes {like.shape} and {arr.shape} differ")
    return arr


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if isinstance(b, Tensor):
        return make_output(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return make_output(a.data + b, (a,), lambda g: (g,), "add")


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if isinstance(b, Tensor):
        return make_output(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return make_output(a.data - b, (a,), lambda g: (g,), "sub")


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if isinstance(b, Tensor):
        return make_output(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    return make_output(a.data * b, (a,), lambda g: (g * b,), "mul")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_output(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def log(x: Tensor) -> Tensor:
    return make_output(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean")


# --------------------------------------------------------------------------
# Loss building blocks


def forward_diff_x(m: Tensor) -> Tensor:
    """dx[..., j] = m[..., j+1] - m[..., j]; last column is zero."""
    _require_4d(m, "forward_diff_x")
    out = np.zeros_like(m.data)
    out[..., :-1] = m.data[..., 1:] - m.data[..., :-1]

    def backward(g):
        gm = np.zeros_like(g)
        gm[..., 1:] += g[..., :-1]
        gm[..., :-1] -= g[..., :-1]
        return (gm,)

    return make_output(out, (m,), backward, "forward_diff_x")


def forward_diff_y(m: Tensor) -> Tensor:
    """dy[..., i, :] = m[..., i+1, :] - m[..., i, :]; last row is zero."""
    _require_4d(m, "forward_diff_y")
    out = np.zeros_like(m.data)
    out[..., :-1, :] = m.data[..., 1:, :] - m.data[..., :-1, :]

    def backward(g):
        gm = np.zeros_like(g)
        gm[..., 1:, :] += g[..., :-1, :]
        gm[..., :-1, :] -= g[..., :-1, :]
        return (gm,)

    return make_output(out, (m,), backward, "forward_diff_y")


def binary_nll(p: Tensor, v: np.ndarray, eps: float) -> Tensor:
    """Mean binary negative log likelihood of labels ``v`` under ``clamp(p, eps, 1-eps)``."""
    v = np.asarray(v, dtype=p.dtype)
    if v.shape != p.shape:
        raise ShapeError(f"binary_nll: prediction shape {p.shape} != label shape {v.shape}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    per_pixel = -(v * np.log(pc) + (1.0 - v) * np.log1p(-pc))
    out = np.asarray(per_pixel.mean(), dtype=p.dtype)
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        d = -(v / pc - (1.0 - v) / (1.0 - pc)) * inside / p.data.size
        return ((g * d).astype(p.dtype),)

    return make_output(out, (p,), backward, "binary_nll")
