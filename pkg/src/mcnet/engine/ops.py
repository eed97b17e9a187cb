"""Differentiable primitives on ``(N, C, H, W)`` tensors.

Every function accepts :class:`Tensor` inputs, computes its result with numpy
and, when a tape is active and an input requires gradients, records a closure
that maps the output gradient back to the inputs.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mcnet.engine.tensor import LayerParams, Tensor, log_pattern, record
from mcnet.errors import NonFiniteError, ShapeError

LOSS_EPS = 1e-7


def _check4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) padding that keeps size under a stride-1 kernel of width k.

    Even kernels put the extra row/column after (bottom/right).
    """
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, p: LayerParams) -> Tensor:
    """Stride-1 convolution with SAME padding (cross-correlation, as usual)."""
    _check4d(x, "conv2d")
    w = p.weight.data
    out_ch, in_ch, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != in_ch:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {c} channels but weight shape "
            f"{w.shape} expects {in_ch}"
        )
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"conv2d: non-finite values in input of shape {x.shape}")

    # Columns are laid out (kh, kw, C) so col2im adds contiguous channel runs.
    if kh == 1 and kw == 1:
        wmat = w.reshape(out_ch, in_ch)
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        wmat = w.transpose(0, 2, 3, 1).reshape(out_ch, -1)
        pt, pb = same_padding(kh)
        pl, pr = same_padding(kw)
        xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N,H,W,C,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, kh * kw * c)
    out = cols @ wmat.T
    out += p.bias.data
    out = np.ascontiguousarray(out.reshape(n, h, wd, out_ch).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gw = gm.T @ cols
        if kh == 1 and kw == 1:
            gw = gw.reshape(w.shape)
        else:
            gw = np.ascontiguousarray(gw.reshape(out_ch, kh, kw, c).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = gm @ wmat
            if kh == 1 and kw == 1:
                gx = np.ascontiguousarray(gcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2))
            else:
                gcols = gcols.reshape(n, h, wd, kh, kw, c)
                gxp = np.zeros((n, h + kh - 1, wd + kw - 1, c), dtype=g.dtype)
                for u in range(kh):
                    for v in range(kw):
                        gxp[:, u:u + h, v:v + wd] += gcols[:, :, :, u, v]
                gx = np.ascontiguousarray(gxp[:, pt:pt + h, pl:pl + wd].transpose(0, 3, 1, 2))
        return gx, gw, gb

    return record("conv2d", (x, p.weight, p.bias), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_pattern("relu", np.packbits(mask))
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return record("relu", (x,), out, lambda g: (g * mask,))


class BatchNormState:
    """Running statistics for one normalisation layer (no learnable affine by default)."""

    def __init__(self, channels, dtype=np.float32, momentum=0.9, eps=1e-5, affine=None):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.affine: LayerParams | None = affine

    @property
    def channels(self):
        return self.running_mean.shape[0]


def batch_norm(x: Tensor, eps=1e-5, state: BatchNormState | None = None, training=True) -> Tensor:
    """Per-channel standardisation over the (N, H, W) axes.

    In training mode the current batch statistics are used (and folded into
    ``state``'s running averages); in eval mode the running averages are used.
    """
    _check4d(x, "batch_norm")
    n, c, h, w = x.shape
    if state is not None:
        eps = state.eps
    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError(
                f"batch_norm: need at least 2 values per channel in training mode, "
                f"got shape {x.shape}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        if state is not None:
            mom = state.momentum
            state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
            state.running_var[...] = mom * state.running_var + (1 - mom) * var
    else:
        if state is None:
            raise ShapeError("batch_norm: eval mode needs running statistics")
        mean, var = state.running_mean, state.running_var
        centered = x.data - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]

    if training:
        def backward(g):
            gmean = g.mean(axis=(0, 2, 3), keepdims=True)
            gxhat = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            return ((g - gmean - xhat * gxhat) * inv_std[None, :, None, None],)
    else:
        def backward(g):
            return (g * inv_std[None, :, None, None],)

    out = record("batch_norm", (x,), xhat, backward)
    affine = state.affine if state is not None else None
    if affine is not None:
        out = _scale_shift(out, affine)
    return out


def _scale_shift(x: Tensor, p: LayerParams) -> Tensor:
    gamma = p.weight.data.reshape(1, -1, 1, 1)
    beta = p.bias.data.reshape(1, -1, 1, 1)
    out = x.data * gamma + beta

    def backward(g):
        gg = (g * x.data).sum(axis=(0, 2, 3)).reshape(p.weight.shape)
        return g * gamma, gg, g.sum(axis=(0, 2, 3))

    return record("scale_shift", (x, p.weight, p.bias), out, backward)


def concat_channels(xs) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    for x in xs:
        _check4d(x, "concat_channels")
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels: shape {x.shape} does not match {ref} outside the channel axis"
            )
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record("concat_channels", xs, out, backward)


def max_pool2d(x: Tensor, pool_size: int) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first
    position of the window in row-major order."""
    _check4d(x, "max_pool2d")
    k = int(pool_size)
    if k < 1:
        raise ShapeError(f"max_pool2d: pool size must be positive, got {pool_size}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial dims of {x.shape} not divisible by {k}")
    if k == 1:
        return record("max_pool2d", (x,), x.data.copy(), lambda g: (g,))
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)[..., None]
    log_pattern("max_pool2d", idx)
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record("max_pool2d", (x,), out, backward)


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, pixel-centre convention.

    Output pixel ``i`` samples the input at ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range.
    """
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    _check4d(x, "upsample_bilinear")
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    if factor == 1:
        return record("upsample_bilinear", (x,), x.data.copy(), lambda g: (g,))
    n, c, h, w = x.shape
    ah = bilinear_matrix(h, h * factor).astype(x.dtype)
    aw = bilinear_matrix(w, w * factor).astype(x.dtype)
    out = np.ascontiguousarray(np.matmul(np.matmul(ah, x.data), aw.T))

    def backward(g):
        return (np.ascontiguousarray(np.matmul(np.matmul(ah.T, g), aw)),)

    return record("upsample_bilinear", (x,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def softmax_channels(x: Tensor) -> Tensor:
    _check4d(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record("softmax_channels", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def scale(x: Tensor, alpha: float) -> Tensor:
    return record("scale", (x,), x.data * alpha, lambda g: (g * alpha,))


def _check_pair(pred, truth, op):
    if pred.shape != truth.shape:
        raise ShapeError(f"{op}: prediction shape {pred.shape} does not match truth {truth.shape}")


def bce_loss(pred: Tensor, truth, eps=LOSS_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``pred`` against 0/1 ``truth``."""
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    _check_pair(pred, t, "bce_loss")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, eps, 1 - eps)
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)
    count = p.size
    value = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / count

    def backward(g):
        gp = (-(t / p) + (1 - t) / (1 - p)) / count
        return (g * gp * inside,)

    return record("bce_loss", (pred,), np.asarray(value, dtype=pred.dtype), backward)


def cce_loss(pred: Tensor, truth, eps=LOSS_EPS) -> Tensor:
    """Mean categorical cross-entropy over pixels; ``truth`` is one-hot on axis 1."""
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    _check_pair(pred, t, "cce_loss")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, eps, 1 - eps)
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)
    count = pred.shape[0] * pred.shape[2] * pred.shape[3]
    value = -(t * np.log(p)).sum() / count

    def backward(g):
        return (g * (-(t / p) / count) * inside,)

    return record("cce_loss", (pred,), np.asarray(value, dtype=pred.dtype), backward)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, n_classes, H, W) indicator array."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(n_classes)[None, :, None, None]).astype(dtype)
