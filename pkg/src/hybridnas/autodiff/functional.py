"""Differentiable primitives.

Every op takes and returns :class:`Tensor` objects; the backward closures
work on raw numpy arrays. Image-like tensors are laid out as (N, C, H, W).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor, make_node

__all__ = [
    "add", "sub", "mul", "matmul", "sum", "mean", "reshape", "transpose",
    "concat", "take", "relu", "gelu", "softmax", "log_softmax", "layer_norm",
    "conv2d", "depthwise_separable_conv", "pool2d", "resample", "upsample",
    "downsample", "linear", "mix", "cross_entropy", "mse",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), "add",
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), "sub",
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        a = as_tensor(a)
        return make_node(a.data * c, (a,), "scale", lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), "mul",
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    # maximum keeps NaN visible instead of mapping it to 0
    return make_node(np.maximum(x.data, 0.0), (x,), "relu", lambda g: (g * pos,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + xd * pdf),)

    return make_node(xd * cdf, (x,), "gelu", bw)


# -- reductions and shape ops -----------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_node(np.array(x.data.sum()), (x,), "sum",
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_node(np.array(x.data.mean()), (x,), "mean",
                     lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                     lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat along axis {axis}: shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return make_node(out, xs, "concat", bw)


def take(x: Tensor, indices: Sequence[int] | slice, axis: int = 1) -> Tensor:
    """Select entries along ``axis`` (a slice or an index list)."""
    idx = [slice(None)] * x.ndim
    idx[axis] = indices if isinstance(indices, slice) else np.asarray(indices, dtype=np.intp)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if isinstance(indices, slice):
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_node(np.ascontiguousarray(x.data[idx]), (x,), "take", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_node(ad @ bd, (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of x."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mix(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """Weighted sum ``sum_k weights[k] * xs[k]`` as one graph node."""
    wd = weights.data
    if wd.shape != (len(xs),):
        raise DimensionError(f"mix: {len(xs)} inputs but weights of shape {wd.shape}")
    datas = [x.data for x in xs]
    out = wd[0] * datas[0]
    for k in range(1, len(datas)):
        out = out + wd[k] * datas[k]

    def bw(g):
        gw = np.array([np.vdot(g, d) for d in datas], dtype=g.dtype)
        return [gw] + [wd[k] * g for k in range(len(datas))]

    return make_node(out, [weights, *xs], "mix", bw)


# -- normalisation --------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), "log_softmax", bw)


def layer_norm(z: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    zd = z.data
    mu = zd.mean(axis=-1, keepdims=True)
    xc = zd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    d = zd.shape[-1]

    def bw(g):
        gx = g * gd
        gz = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape)
        gbias = _unbroadcast(g, bd.shape)
        return gz, ggain, gbias

    if gd.shape[-1] != d or bd.shape[-1] != d:
        raise DimensionError(f"layer_norm: features {d}, gain {gd.shape}, bias {bd.shape}")
    return make_node(xhat * gd + bd, (z, gain, bias), "layer_norm", bw)


# -- convolution and pooling --------------------------------------------------------

def _out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
             ho: int, wo: int) -> np.ndarray:
    """Read-only strided view (N, C, kh, kw, Ho, Wo) over a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(n, c, kh, kw, ho, wo),
                      strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
                      writeable=False)


def _scatter_windows(gcols: np.ndarray, padded_shape, stride: int, dilation: int,
                     padding: int, out_shape) -> np.ndarray:
    """Adjoint of :func:`_windows` followed by un-padding."""
    _, _, kh, kw, ho, wo = gcols.shape
    gp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = i * dilation, j * dilation
            gp[:, :, hs:hs + stride * (ho - 1) + 1:stride,
               ws:ws + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
    h, w = out_shape[2:]
    return gp[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: Tensor, k: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0,
           groups: int = 1, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of x (N, Cin, H, W) with k (Cout, Cin/groups, kh, kw)."""
    xd, kd = x.data, k.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {xd.shape} and {kd.shape}")
    n, cin, h, w = xd.shape
    cout, cin_g, kh, kw = kd.shape
    if cin_g * groups != cin or cout % groups:
        raise DimensionError(
            f"conv2d channel mismatch: input {xd.shape} vs kernel {kd.shape} (groups={groups})")
    ho = _out_size(h, kh, stride, dilation, padding)
    wo = _out_size(w, kw, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kd.shape} does not fit input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo)
    if groups == 1:
        out = np.tensordot(kd, cols, axes=([1, 2, 3], [1, 2, 3]))  # (Cout, N, Ho, Wo)
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    elif groups == cin and cout == cin:
        out = np.einsum("ncijhw,cij->nchw", cols, kd[:, 0])
    else:
        og = cout // groups
        cg = cols.reshape(n, groups, cin_g, kh, kw, ho, wo)
        kg = kd.reshape(groups, og, cin_g, kh, kw)
        out = np.einsum("ngcijhw,gocij->ngohw", cg, kg).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        if groups == 1:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (Cout, Cin, kh, kw)
            gcols = np.tensordot(kd, g, axes=([0], [1]))  # (Cin, kh, kw, N, Ho, Wo)
            gcols = gcols.transpose(3, 0, 1, 2, 4, 5)
        elif groups == cin and cout == cin:
            gk = np.einsum("nchw,ncijhw->cij", g, cols)[:, None]
            gcols = np.einsum("nchw,cij->ncijhw", g, kd[:, 0])
        else:
            og = cout // groups
            gg = g.reshape(n, groups, og, ho, wo)
            cg = cols.reshape(n, groups, cin_g, kh, kw, ho, wo)
            kg = kd.reshape(groups, og, cin_g, kh, kw)
            gk = np.einsum("ngohw,ngcijhw->gocij", gg, cg).reshape(kd.shape)
            gcols = np.einsum("ngohw,gocij->ngcijhw", gg, kg).reshape(n, cin, kh, kw, ho, wo)
        gx = _scatter_windows(gcols, xp.shape, stride, dilation, padding, xd.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, k) if bias is None else (x, k, bias)
    return make_node(out, parents, "conv2d", bw)


def depthwise_separable_conv(x: Tensor, dw: Tensor, pw: Tensor, dilation: int = 1,
                             padding: int | None = None) -> Tensor:
    """Per-channel spatial conv ``dw`` (C, 1, k, k) then 1x1 mixing ``pw`` (Cout, C, 1, 1)."""
    c = x.shape[1]
    if dw.shape[0] != c or dw.shape[1] != 1:
        raise DimensionError(f"depthwise kernel {dw.shape} does not match input channels {c}")
    if padding is None:
        padding = dilation * (dw.shape[2] - 1) // 2
    y = conv2d(x, dw, dilation=dilation, padding=padding, groups=c)
    return conv2d(y, pw)


def pool2d(x: Tensor, mode: str = "avg", window: int = 3, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Max or average pooling. Padding never wins a max and is left out of averages."""
    if window < 1:
        raise ValidationError(f"pool window must be >= 1, got {window}")
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"pool2d expects a 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    ho = _out_size(h, window, stride, 1, padding)
    wo = _out_size(w, window, stride, 1, padding)
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    if mode == "max":
        xp = np.pad(xd, pads, constant_values=-np.inf) if padding else xd
        cols = _windows(xp, window, window, stride, 1, ho, wo).reshape(n, c, window * window, ho, wo)
        arg = cols.argmax(axis=2)
        out = np.take_along_axis(cols, arg[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            onehot = np.zeros((n, c, window * window, ho, wo), dtype=g.dtype)
            np.put_along_axis(onehot, arg[:, :, None], g[:, :, None], axis=2)
            onehot = onehot.reshape(n, c, window, window, ho, wo)
            return (_scatter_windows(onehot, xp.shape, stride, 1, padding, xd.shape),)

        return make_node(np.ascontiguousarray(out), (x,), "max_pool", bw)
    if mode != "avg":
        raise ValidationError(f"unknown pool mode {mode!r}")
    xp = np.pad(xd, pads) if padding else xd
    ones = np.pad(np.ones((1, 1, h, w), dtype=xd.dtype), pads) if padding else np.ones((1, 1, h, w), dtype=xd.dtype)
    count = _windows(ones, window, window, stride, 1, ho, wo).sum(axis=(2, 3))
    out = _windows(xp, window, window, stride, 1, ho, wo).sum(axis=(2, 3)) / count

    def bw(g):
        gc = np.broadcast_to((g / count)[:, :, None, None], (n, c, window, window, ho, wo))
        return (_scatter_windows(gc, xp.shape, stride, 1, padding, xd.shape),)

    return make_node(out, (x,), "avg_pool", bw)


# -- resampling ---------------------------------------------------------------------

def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel (align_corners=False) mapping."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    ah = _bilinear_matrix(h, factor, x.dtype)
    aw = _bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_node(out, (x,), "upsample", bw)


def downsample(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"cannot downsample spatial dims {(h, w)} by {factor}")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def bw(g):
        gg = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gg / (factor * factor),)

    return make_node(out, (x,), "downsample", bw)


def resample(x: Tensor, factor: int, direction: str) -> Tensor:
    """Bilinear ``up`` or average-pool ``down`` by a power-of-two factor."""
    if factor < 1 or factor & (factor - 1):
        raise DimensionError(f"resample factor must be a power of two, got {factor}")
    if direction == "up":
        return upsample(x, factor)
    if direction == "down":
        return downsample(x, factor)
    raise ValidationError(f"resample direction must be 'up' or 'down', got {direction!r}")


# -- losses ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label]; logits (N, K, ...), labels (N, ...)."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = np.argwhere((labels < 0) | (labels >= k))[0]
        raise ValidationError(
            f"label {labels[tuple(bad)]} at index {tuple(int(i) for i in bad)} "
            f"outside class range [0, {k})")
    lab = labels.astype(np.intp)
    logp = log_softmax(logits, axis=1)
    lp = logp.data
    picked = np.take_along_axis(lp, lab[:, None], axis=1)[:, 0]
    count = lab.size
    shape = lp.shape

    def bw(g):
        out = np.zeros(shape, dtype=lp.dtype)
        np.put_along_axis(out, lab[:, None], -g / count, axis=1)
        return (out,)

    return make_node(np.array(-picked.mean()), (logp,), "nll", bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return make_node(np.array((diff * diff).mean()), (a, b), "mse", bw)
