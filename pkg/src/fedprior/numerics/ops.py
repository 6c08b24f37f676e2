"""Differentiable ops. Each registered op has an analytic backward."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError
from .autograd import Tensor, as_tensor, make_node, register, unbroadcast


# -- elementwise -------------------------------------------------------------

@register("add")
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


@register("sub")
def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


@register("mul")
def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


@register("div")
def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_node(out, (a, b), bw)


@register("neg")
def neg(a):
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


@register("square")
def square(a):
    a = as_tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


@register("exp")
def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


@register("log")
def log(a):
    a = as_tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


@register("sqrt")
def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (0.5 * g / out,))


@register("sigmoid")
def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


@register("silu")
def silu(a):
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_node(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


@register("gelu")
def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out, (a,), bw)


# -- reductions and shape ----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@register("sum")
def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (a,), bw)


@register("mean")
def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


@register("reshape")
def reshape(a, shape):
    a = as_tensor(a)
    src = a.data.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


@register("transpose")
def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


@register("getitem")
def getitem(a, idx):
    a = as_tensor(a)
    shape = a.data.shape
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), bw)


@register("concat")
def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


@register("embedding")
def embedding(table, indices):
    """Rows of ``table`` selected by an integer array; output shape indices.shape + (d,)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.data.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return make_node(table.data[idx], (table,), bw)


# -- linear algebra ----------------------------------------------------------

@register("matmul")
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_node(out, (a, b), bw)


@register("einsum")
def einsum(subscripts, a, b):
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, bd, optimize=True)
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, ad, optimize=True)
        return ga, gb

    return make_node(out, (a, b), bw)


# -- normalization / probability ---------------------------------------------

def _softmax(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@register("softmax")
def softmax(a, axis=-1):
    a = as_tensor(a)
    s = _softmax(a.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (a,), bw)


@register("log_softmax")
def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), bw)


@register("cross_entropy")
def cross_entropy(logits, targets):
    """Mean of -log softmax(logits)[..., target] over all leading positions."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    V = x.shape[-1]
    if t.shape != x.shape[:-1]:
        raise ShapeError(f"targets shape {t.shape} does not match logits {x.shape}")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target index out of range [0, {V})")
    flat = x.reshape(-1, V)
    tf = t.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = tf.size
    loss = float(np.mean(lse - z[np.arange(n), tf]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tf] -= 1.0
        return ((g / n) * p.reshape(x.shape),)

    return make_node(np.array(loss), (logits,), bw)


@register("layer_norm")
def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc / sigma

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return make_node(y, (a,), bw)


@register("l2_normalize")
def l2_normalize(a, eps=1e-12):
    """Scale rows along the last axis to unit Euclidean norm."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + eps
    y = x / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return make_node(y, (a,), bw)


@register("straight_through")
def straight_through(a, value):
    """Forward returns ``value``; backward passes the gradient to ``a`` unchanged."""
    a = as_tensor(a)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != a.data.shape:
        raise ShapeError(f"straight-through value shape {value.shape} != {a.data.shape}")
    return make_node(value.copy(), (a,), lambda g: (g,))


# -- convolution / resampling (NHWC) -----------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,H',W',C,kh,kw
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.transpose(0, 1, 2, 4, 5, 3)  # B,ho,wo,kh,kw,C
    return np.ascontiguousarray(win).reshape(-1, kh * kw * xp.shape[3])


def _conv_input_grad(g, wd, stride, padding, H, W):
    """Input gradient of conv2d: for stride 1, a correlation of the padded output gradient
    with the flipped kernel (one im2col matmul); otherwise a per-offset scatter."""
    B, ho, wo, Co = g.shape
    kh, kw, C, _ = wd.shape
    lo_h, lo_w = kh - 1 - padding, kw - 1 - padding
    hi_h = H + kh - 1 - lo_h - ho
    hi_w = W + kw - 1 - lo_w - wo
    if stride > 1 or min(lo_h, lo_w, hi_h, hi_w) < 0 or H * W < 256:
        # strided, small, or padding beyond the kernel reach: scatter per offset instead
        gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C))
        g2 = g.reshape(-1, Co)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    g2 @ wd[i, j].T).reshape(B, ho, wo, C)
        return gxp[:, padding : padding + H, padding : padding + W]
    gp = np.pad(g, ((0, 0), (lo_h, hi_h), (lo_w, hi_w), (0, 0)))
    wf = wd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, C)
    return (_im2col(gp, kh, kw, 1, H, W) @ wf).reshape(B, H, W, C)


@register("conv2d")
def conv2d(x, w, b=None, stride=1, padding=1):
    """2D convolution by im2col + matmul. x: [B,H,W,Cin], w: [kh,kw,Cin,Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[3] != wd.shape[2]:
        raise ShapeError(f"conv2d shapes incompatible: x {xd.shape}, w {wd.shape}")
    B, H, W, C = xd.shape
    kh, kw, _, Co = wd.shape
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wd.reshape(-1, Co)
    out = (cols @ wmat).reshape(B, ho, wo, Co)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, Co)
        gw = (cols.T @ g2).reshape(wd.shape)
        grads = [_conv_input_grad(g, wd, stride, padding, H, W), gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_node(out, parents, bw)


@register("upsample_nearest")
def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    B, H, W, C = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return make_node(out, (x,), bw)


def resize(x, rows, cols):
    """Apply separable resampling matrices: out[b,i,j,c] = rows[i,p] cols[j,q] x[b,p,q,c]."""
    x = as_tensor(x)
    t = einsum("ip,bpqc->biqc", Tensor(rows), x)
    return einsum("jq,biqc->bijc", Tensor(cols), t)


@register("relu")
def relu(a):
    a = as_tensor(a)
    m = a.data > 0
    return make_node(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,))


def mse(a, b):
    return mean(square(sub(a, b)))


def ensure_finite(t: Tensor, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("math", "np")]
