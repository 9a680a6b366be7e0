"""Differentiable primitives.

Every function takes :class:`Tensor` inputs (python scalars and numpy arrays
are accepted as constants) and returns a Tensor whose backward rule is
recorded on the active tape.
"""
from __future__ import annotations

from numbers import Number

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_output


class ShapeError(ValueError):
    pass


def _const(x, like: Tensor):
    if isinstance(x, Number):
        return x
    return np.asarray(x, dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return make_output(a.data + c, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return make_output(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        c = _const(a, b)
        return make_output(c - b.data, (b,), lambda g: (-g,))
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return make_output(a.data - c, (a,), lambda g: (g,))
    sa, sb = a.shape, b.shape
    return make_output(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return make_output(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_output(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b if isinstance(b, Number) else 1.0 / np.asarray(b))
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_output(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_output(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_output(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_output(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_output(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * pos,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {ad.shape} @ {bd.shape}")
    return make_output(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [N, in]."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)


# ------------------------------------------------------------------- shaping

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return make_output(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_output(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_output(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_output(np.broadcast_to(x.data, shape).copy(), (x,),
                       lambda g: (_unbroadcast(g, old),))


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_output(np.array(x.data[idx]), (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_output(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# ------------------------------------------------------------ softmax & loss

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_output(out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs {targets.shape[0]} targets")
    k = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target class out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.size)
    loss = -logp[rows, targets].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / targets.size),)

    return make_output(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ------------------------------------------------------------- convolutions

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense 2-D cross-correlation, ``x`` [B,Cin,H,W], ``weight`` [Cout,Cin,k,k]."""
    B, C, H, W = x.shape
    O, Ci, k, k2 = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if padding is None:
        padding = (k - 1) // 2
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    wd = weight.data

    if k == 1:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        w2 = wd[:, :, 0, 0]
        out = np.einsum("oc,bchw->bohw", w2, xs, optimize=True)

        def bw1(g):
            gx_s = np.einsum("oc,bohw->bchw", w2, g, optimize=True)
            if stride > 1:
                gx = np.zeros(x.shape, dtype=g.dtype)
                gx[:, :, ::stride, ::stride] = gx_s
            else:
                gx = gx_s
            gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
            return gx, gw

        return make_output(out, (x, weight), bw1)

    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = wd.reshape(O, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(O, C, k, k)
        gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw

    return make_output(np.ascontiguousarray(out), (x, weight), bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1,
                     padding: int | None = None) -> Tensor:
    """Per-channel cross-correlation, ``weight`` [C,1,k,k]."""
    B, C, H, W = x.shape
    Cw, one, k, _ = weight.shape
    if Cw != C or one != 1:
        raise ShapeError(f"depthwise_conv2d: kernel {weight.shape} for {C} channels")
    if padding is None:
        padding = (k - 1) // 2
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    xp = _pad(x.data, padding)
    wd = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] * \
                wd[:, i, j][None, :, None, None]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.zeros((C, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                gxp[sl] += g * wd[:, i, j][None, :, None, None]
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw[:, None]

    return make_output(out, (x, weight), bw)


# ------------------------------------------------------------ normalization

def batch_norm2d(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode the running statistics are updated in place.
    ``gamma``/``beta`` of ``None`` mean a frozen affine of 1 / 0.
    """
    B, C, H, W = x.shape
    xd = x.data
    if training:
        n = B * H * W
        if n < 2:
            raise ShapeError("batch_norm2d in train mode needs B*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C) * (n / (n - 1))
    else:
        mu = running_mean.reshape(1, C, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, C, 1, 1).astype(xd.dtype)
        xc = xd - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.reshape(1, C, 1, 1) if gamma is not None else None
    out = xhat * g_ if g_ is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(1, C, 1, 1)
    out = out.astype(xd.dtype, copy=False)

    inputs = [x] + [t for t in (gamma, beta) if t is not None]

    def bw(g):
        gxhat = g * g_ if g_ is not None else g
        if training:
            m = B * H * W
            gx = (inv / m) * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_output(out, inputs, bw)


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each per-pixel channel vector by ``max(norm, eps)``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    out = xd / denom

    def bw(g):
        # d(x/|x|) = (g - u (u.g)) / |x| where the norm is active
        proj = (g * out).sum(axis=1, keepdims=True)
        gx = np.where(big, (g - out * proj) / denom, g / eps)
        return (gx,)

    return make_output(out, (x,), bw)


# --------------------------------------------------------------- reductions

def max_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the subgradient goes to the lowest-index argmax."""
    xd = x.data
    arg = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(arg, axis), gk, axis=axis)
        return (full,)

    return make_output(out, (x,), bw)


def reduce_max_over_set(x: Tensor) -> Tensor:
    """Elementwise max over the leading set dimension: [n,C,H,W] -> [1,C,H,W]."""
    return max_axis(x, 0, keepdims=True)


def set_max(x: Tensor, set_size: int) -> Tensor:
    """Max over consecutive groups of ``set_size`` rows: [B*n,...] -> [B,...]."""
    B = x.shape[0] // set_size
    if B * set_size != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} rows do not split into sets of {set_size}")
    return max_axis(reshape(x, (B, set_size) + x.shape[1:]), 1)


def repeat_sets(x: Tensor, set_size: int) -> Tensor:
    """Inverse layout of :func:`set_max`: [B,...] -> [B*n,...] by repetition."""
    B = x.shape[0]
    expanded = broadcast_to(reshape(x, (B, 1) + x.shape[1:]), (B, set_size) + x.shape[1:])
    return reshape(expanded, (B * set_size,) + x.shape[1:])


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------- resampling

def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    H, W = size
    mh = _bilinear_matrix(H, x.shape[2]).astype(x.dtype)
    mw = _bilinear_matrix(W, x.shape[3]).astype(x.dtype)
    out = np.einsum("Hh,bchw,Ww->bcHW", mh, x.data, mw, optimize=True)
    return make_output(out, (x,),
                       lambda g: (np.einsum("Hh,bcHW,Ww->bchw", mh, g, mw, optimize=True),))
