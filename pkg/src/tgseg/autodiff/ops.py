"""Differentiable operations on :class:`Tensor`.

Broadcasting is one-directional: the smaller operand may be stretched to the
larger operand's shape (leading batch dims, size-1 dims, scalars), never both
ways at once.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from . import _kernels
from .tensor import RankError, ShapeError, Tensor, as_tensor, make_result


class EmptyDimError(ShapeError):
    """Normalization over an axis of length zero."""


class EmptyGridError(ShapeError):
    """Sampling from a grid with no nodes."""


# ---------------------------------------------------------------------------
# helpers


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None
    if out != a and out != b:
        raise ShapeError(f"{op}: shapes {a} and {b} need two-way broadcasting")
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * mask,), "relu")


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT_2))
    out = (xd * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((g * (cdf + xd * pdf)).astype(x.dtype),)

    return make_result(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return make_result(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {"add", "mul", "relu", "gelu", "sigmoid", "scale"}


def elementwise(x, y=None, kind: str = "add"):
    """Dispatch by name; ``y`` is the second operand, or the factor for ``scale``."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind == "add":
        return add(x, y)
    if kind == "mul":
        return mul(x, y)
    if kind == "scale":
        return scale(x, y)
    return {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[kind](x)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _broadcast_shape(x.shape, shape, "expand")
    src = x.shape
    return make_result(np.broadcast_to(x.data, shape), (x,), lambda g: (unbroadcast(g, src),), "expand")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(x: Tensor, idx) -> Tensor:
    src, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(src, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_result(x.data[idx], (x,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(data, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(data, tensors, bw, "stack")


def pad2d(x: Tensor, pad: tuple[int, int, int, int], mode: str = "zeros") -> Tensor:
    """Pad the last two axes by ``(top, bottom, left, right)``."""
    t, b, l, r = pad
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    if mode == "zeros":
        data = np.pad(x.data, widths)
    elif mode == "replicate":
        if h < 1 or w < 1:
            raise ShapeError("replicate padding of an empty grid")
        data = np.pad(x.data, widths, mode="edge")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")

    def bw(g):
        if mode == "zeros":
            return (g[..., t:t + h, l:l + w],)
        gw = g[..., l:l + w].copy()
        if l:
            gw[..., 0] += g[..., :l].sum(-1)
        if r:
            gw[..., -1] += g[..., l + w:].sum(-1)
        gx = gw[..., t:t + h, :].copy()
        if t:
            gx[..., 0, :] += gw[..., :t, :].sum(-2)
        if b:
            gx[..., -1, :] += gw[..., t + h:, :].sum(-2)
        return (gx,)

    return make_result(data, (x,), bw, "pad2d")


# ---------------------------------------------------------------------------
# reductions (f64 accumulation)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype),)

    return make_result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``[in, out]``."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# normalization / attention primitives


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise EmptyDimError("layer_norm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match dim {d}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).astype(x.dtype)
    rstd = rstd.astype(x.dtype)
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd

    def bw(g):
        gx = gg = gb = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = np.sum(g * xhat, axis=lead, dtype=np.float64).astype(x.dtype)
        if beta.requires_grad:
            gb = np.sum(g, axis=lead, dtype=np.float64).astype(x.dtype)
        if x.requires_grad:
            dxh = g * gd
            m1 = dxh.mean(-1, keepdims=True)
            m2 = (dxh * xhat).mean(-1, keepdims=True)
            gx = rstd * (dxh - m1 - xhat * m2)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise EmptyDimError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale vectors along ``axis`` to unit L2 norm (norm floored at ``eps``)."""
    n = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=axis, keepdims=True))
    small = n < eps
    nc = np.maximum(n, eps).astype(x.dtype)
    out = x.data / nc

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(small, g, g - out * proj) / nc
        return (gx.astype(x.dtype),)

    return make_result(out, (x,), bw, "normalize")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = weight.shape

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, dim))
        return (out,)

    return make_result(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [b,c,h,w] and [o,c,kh,kw], got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output size is not integral for input {x.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns laid out [b, c*kh*kw, ho*wo] so the product lands directly in NCHW
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)
    w2 = kernel.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(b, o, ho, wo)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(b, o, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            gk = gk.astype(kernel.dtype).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3).reshape(b, c, kh, kw, ho, wo)
            gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(np.sum(g3, axis=(0, 2), dtype=np.float64).astype(bias.dtype))
        return tuple(grads)

    return make_result(out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling over the last two axes."""
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // k, k, w // k, k)).mean(axis=(-3, -1), dtype=x.dtype)

    def bw(g):
        g = np.broadcast_to(g[..., :, None, :, None] / (k * k), lead + (h // k, k, w // k, k))
        return (g.reshape(x.shape).astype(x.dtype),)

    return make_result(out, (x,), bw, "avg_pool2d")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Half-pixel bilinear resampling matrix of shape ``[n_out, n_in]``."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the last two axes to ``size`` (half-pixel centers, edge clamp)."""
    h, w = x.shape[-2:]
    ah = _interp_matrix(h, size[0], x.dtype)
    aw = _interp_matrix(w, size[1], x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), bw, "upsample_bilinear")


def _level_layout(shapes: Sequence[tuple[int, int]]):
    shapes_arr = np.asarray(shapes, dtype=np.int64).reshape(-1, 2)
    if (shapes_arr < 1).any():
        raise EmptyGridError(f"sampling grid with an empty side: {shapes_arr.tolist()}")
    sizes = shapes_arr[:, 0] * shapes_arr[:, 1]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return starts, shapes_arr, int(sizes.sum())


def multilevel_sample(value: Tensor, shapes: Sequence[tuple[int, int]], loc: Tensor,
                      attn: Tensor) -> Tensor:
    """Attention-weighted bilinear sampling across pyramid levels.

    ``value`` is ``[n, S, c]`` (levels flattened row-major and concatenated),
    ``loc`` is ``[n, q, levels, points, 2]`` normalized ``(x, y)`` and ``attn``
    is ``[n, q, levels, points]``. Returns ``[n, q, c]``.
    """
    starts, shapes_arr, total = _level_layout(shapes)
    if value.ndim != 3 or value.shape[1] != total:
        raise ShapeError(f"value {value.shape} does not match level shapes {shapes_arr.tolist()}")
    if loc.shape != attn.shape + (2,) or loc.shape[0] != value.shape[0]:
        raise ShapeError(f"loc {loc.shape} / attn {attn.shape} / value {value.shape} disagree")
    vd = np.ascontiguousarray(value.data)
    ld = np.ascontiguousarray(loc.data.astype(value.dtype, copy=False))
    ad = np.ascontiguousarray(attn.data.astype(value.dtype, copy=False))
    out = _kernels.sample_forward(vd, starts, shapes_arr, ld, ad)

    def bw(g):
        gv, gl, ga = _kernels.sample_backward(vd, starts, shapes_arr, ld, ad, np.ascontiguousarray(g))
        return gv, gl.astype(loc.dtype, copy=False), ga.astype(attn.dtype, copy=False)

    return make_result(out, (value, loc, attn), bw, "multilevel_sample")


def bilinear_sample(value: Tensor, points: Tensor) -> Tensor:
    """Sample a ``[c, h, w]`` map at ``[p, 2]`` normalized ``(x, y)`` points -> ``[p, c]``.

    Points outside ``[0, 1]`` are clamped; their gradient is zero.
    """
    if value.ndim != 3:
        raise ShapeError(f"bilinear_sample expects value [c,h,w], got {value.shape}")
    c, h, w = value.shape
    if h < 1 or w < 1:
        raise EmptyGridError(f"bilinear_sample on empty grid {value.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects points [p,2], got {points.shape}")
    p = points.shape[0]
    flat = reshape(transpose(value, (1, 2, 0)), (1, h * w, c))
    loc = reshape(points, (1, p, 1, 1, 2))
    ones = Tensor(np.ones((1, p, 1, 1), dtype=value.dtype))
    return reshape(multilevel_sample(flat, [(h, w)], loc, ones), (p, c))


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean pixelwise binary cross-entropy on raw logits."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ShapeError(f"bce targets {y.shape} vs logits {x.shape}")
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(np.sum(per, dtype=np.float64) / x.size, dtype=x.dtype)

    def bw(g):
        return ((special.expit(x) - y).astype(x.dtype) * (g / x.size),)

    return make_result(out, (logits,), bw, "bce_with_logits")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows of ``[n, k]`` logits."""
    if logits.ndim != 2:
        raise RankError(f"cross_entropy expects [n,k] logits, got {logits.shape}")
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    n = x.shape[0]
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = np.asarray(-np.sum(logp[np.arange(n), t], dtype=np.float64) / n, dtype=x.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1
        return ((p * (g / n)).astype(x.dtype),)

    return make_result(out, (logits,), bw, "cross_entropy")
