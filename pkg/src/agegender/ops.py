"""Differentiable layer operations on :class:`~agegender.tensor.Tensor`.

All image ops assume (N, C, H, W) layout.  Convolution is implemented
as im2col + matmul; the backward pass of every op is written by hand.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, make_result


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _check_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{name} must have rank {rank}, got dims {x.dims}")


# -- convolution ------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only (N, C, Ho, Wo, kh, kw) view of strided kh x kw patches."""
    n, c, h, w = xp.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (n, c, ho, wo, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: out[n,o,i,j] = sum_{c,u,v} w[o,c,u,v] * xpad[n,c,i*s+u,j*s+v] + b[o]."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv2d stride must be a positive integer, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be non-negative, got {pad}")
    n, cin, h, w = x.dims
    cout, wcin, kh, kw = weight.dims
    if wcin != cin:
        raise DimensionError(f"conv2d channel axis mismatch: input C={cin}, weight Cin={wcin}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input H={h + 2 * pad}, W={w + 2 * pad}"
        )
    if bias is not None and bias.dims != (cout,):
        raise DimensionError(f"conv2d bias must have dims ({cout},), got {bias.dims}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = _zero_pad(x.data, pad) if pad else np.ascontiguousarray(x.data)
    cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.dims)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + hs:stride, v:v + ws:stride] += dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, inputs, bw, "conv2d")


# -- pooling / resampling ---------------------------------------------------

def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Max over k x k windows.  Gradient goes to the first maximal element of each window."""
    _check_rank(x, 4, "maxpool2d input")
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.dims
    if h < k or w < k:
        raise DimensionError(f"maxpool2d window {k} larger than input H={h}, W={w}")
    if k == 1 and stride == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "maxpool2d")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    flat = _windows(x.data, k, k, stride).reshape(n, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.dims, dtype=g.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for o in range(k * k):
            u, v = divmod(o, k)
            gx[:, :, u:u + hs:stride, v:v + ws:stride] += np.where(idx == o, g, 0)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def _bilinear_coords(size_in: int, size_out: int):
    scale = size_in / size_out
    src = (np.arange(size_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size_in - 1)
    return i0, i1, src - i0


def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Dense (size_out, size_in) matrix of align-corners-false bilinear weights."""
    i0, i1, lam = _bilinear_coords(size_in, size_out)
    mat = np.zeros((size_out, size_in))
    rows = np.arange(size_out)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling with align_corners=False coordinate mapping.

    Written as a lerp ``a + t*(b - a)`` so constant fields stay exactly constant.
    """
    _check_rank(x, 4, "upsample_bilinear input")
    n, c, h, w = x.dims
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_bilinear target {out_h}x{out_w} smaller than source {h}x{w}")
    if out_h == h and out_w == w:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    dt = x.dtype
    r0, r1, rl = _bilinear_coords(h, out_h)
    c0, c1, cl = _bilinear_coords(w, out_w)
    top, bot = x.data[:, :, r0, :], x.data[:, :, r1, :]
    rows = top + rl.astype(dt)[:, None] * (bot - top)
    left, right = rows[:, :, :, c0], rows[:, :, :, c1]
    out = left + cl.astype(dt) * (right - left)
    ah = interpolation_matrix(h, out_h).astype(dt)
    aw = interpolation_matrix(w, out_w).astype(dt)

    def bw(g):
        return (ah.T @ g @ aw,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "upsample_bilinear")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    _check_rank(x, 4, "global_avg_pool input")
    n, c, h, w = x.dims

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.dims).astype(g.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.dims[0], -1)


# -- normalisation ----------------------------------------------------------

class DegenerateBatchError(ValueError):
    """Batch statistics are undefined (a single element per channel)."""


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode uses batch statistics over (N, H, W) and updates
    ``running_mean``/``running_var`` in place (unbiased variance for the
    running estimate).  In eval mode uses the running statistics.
    """
    _check_rank(x, 4, "batchnorm2d input")
    n, c, h, w = x.dims
    if scale.dims != (c,) or shift.dims != (c,):
        raise DimensionError(f"batchnorm2d affine params must have dims ({c},)")
    bshape = (1, c, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var.astype(x.dtype) + eps)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv.reshape(bshape)
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def bw_eval(g):
            gx = g * (scale.data * inv).reshape(bshape) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, scale, shift), bw_eval, "batchnorm2d")

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"batchnorm2d in train mode needs N*H*W >= 2, got {m}")
    mu = x.data.mean(axis=(0, 2, 3))
    centred = x.data - mu.reshape(bshape)
    var = (centred * centred).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1))

    def bw(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * scale.data.reshape(bshape)
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, gscale, gshift

    return make_result(out, (x, scale, shift), bw, "batchnorm2d")


# -- dense / activations ----------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ W + b with W of dims (F, G)."""
    _check_rank(x, 2, "dense input")
    _check_rank(weight, 2, "dense weight")
    if x.dims[1] != weight.dims[0]:
        raise DimensionError(f"dense inner dimension mismatch: input F={x.dims[1]}, weight F={weight.dims[0]}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.dims != (weight.dims[1],):
            raise DimensionError(f"dense bias must have dims ({weight.dims[1]},), got {bias.dims}")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, inputs, bw, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept inside the open interval (0, 1) for every finite input."""
    # exp of -|x| never overflows, and the split keeps relative precision for large negative x
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    s = _open_unit(s)

    def bw(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), bw, "sigmoid")


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def _open_unit(p: np.ndarray) -> np.ndarray:
    """Clamp probabilities into the open interval (0, 1); moves values by at most one ulp-scale step."""
    info = np.finfo(p.dtype)
    return np.clip(p, info.tiny, 1.0 - info.epsneg)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; outputs lie strictly inside (0, 1) when the axis has >1 entry."""
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    if x.dims[axis] > 1:
        s = _open_unit(s)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


# -- structural -------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    first = tensors[0]
    axis = _axis(first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise DimensionError(f"concat rank mismatch: {first.dims} vs {t.dims}")
        bad = [a for a in range(first.ndim) if a != axis and t.dims[a] != first.dims[a]]
        if bad:
            raise DimensionError(f"concat non-concat axes {bad} differ: {first.dims} vs {t.dims}")
    sizes = [t.dims[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(out, tuple(tensors), bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`: slice ``x`` into consecutive pieces along ``axis``."""
    axis = _axis(x, axis)
    if sum(sizes) != x.dims[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to axis length {x.dims[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros(x.dims, dtype=g.dtype)
            full[sl] = g
            return (full,)

        pieces.append(make_result(x.data[sl].copy(), (x,), bw, "split"))
        start += size
    return pieces


def detach(x: Tensor) -> Tensor:
    return x.detach()


# -- losses -----------------------------------------------------------------

def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    _check_rank(logits, 2, "cross_entropy logits")
    n, k = logits.dims
    labels = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(loss, (logits,), bw, "cross_entropy")
