"""Differentiable primitives.

Every op takes and returns :class:`Tensor`; activations use N x C x H x W.
Backward closures return one gradient (or ``None``) per parent.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, ConstraintError, DataError
from .tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ConfigurationError(f"{name} expects a rank-{rank} tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # -> N, Ho, Wo, C, kh, kw
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """2-D cross-correlation.

    ``pad`` is either an int (all sides) or a ``(before, after)`` pair used
    for both spatial axes, e.g. ``(0, 1)`` for stride-2 "same" padding on
    even inputs.
    """
    _check_rank(x, 4, "conv2d input")
    _check_rank(w, 4, "conv2d weight")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    p0, p1 = (pad, pad) if np.isscalar(pad) else (int(pad[0]), int(pad[1]))
    if p0 < 0 or p1 < 0 or stride < 1:
        raise ConfigurationError(f"invalid conv2d stride={stride} pad={pad}")
    if b is not None and b.shape != (f,):
        raise ConfigurationError(f"conv2d bias shape {b.shape} does not match {f} filters")
    span_h, span_w = h + p0 + p1 - kh, wd + p0 + p1 - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d output size not integral: H={h} W={wd} k={kh}x{kw} stride={stride} pad={pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p0, p1), (p0, p1))) if p0 or p1 else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            # col2im accumulated channels-last, one strided add per kernel tap
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=g.dtype)
            he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + he : stride, j : j + we : stride] += dcols[..., i, j]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gxp[:, :, p0 : p0 + h, p0 : p0 + wd] if p0 or p1 else gxp)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add needs congruent shapes, got {a.shape} and {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor of equal shape or a constant."""
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        return make_result(a.data * const, (a,), lambda g: (_unbroadcast(g * const, a.shape),))
    if a.shape != b.shape:
        raise ConfigurationError(f"mul needs congruent shapes, got {a.shape} and {b.shape}")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def dropout(x: Tensor, rate: float, seed: int | None = None, train: bool = True) -> Tensor:
    """Inverted dropout; identity in eval mode or at ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    m = (keep * scale).astype(x.dtype)
    return make_result(x.data * m, (x,), lambda g: (g * m,))


def pointwise(x: Tensor, kind: str, other: Tensor | None = None, rate: float = 0.0,
              seed: int | None = None, mode: str = "train") -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "add":
        return add(x, other)
    if kind == "dropout":
        return dropout(x, rate, seed, train=(mode == "train"))
    raise ConfigurationError(f"unknown pointwise kind {kind!r}")


# --------------------------------------------------------------------------
# normalization


class BatchNormStats:
    """Running mean / variance of one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, mode: str = "train") -> Tensor:
    _check_rank(x, 4, "batchnorm2d input")
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    gam = gamma.data.reshape(shape)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DataError(f"batch too small for batchnorm in train mode: N*H*W={m}")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        mom = np.asarray(BN_MOMENTUM, dtype=x.dtype)
        stats.mean[:] = (1 - mom) * stats.mean + mom * mu
        stats.var[:] = (1 - mom) * stats.var + mom * var * (m / (m - 1))
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype).reshape(shape)
        xhat = xc * inv
        out = gam * xhat + beta.data.reshape(shape)

        def backward(g):
            gsum = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                # d/dx of gamma * (x - mu) / sigma with batch statistics
                gx = (gam * inv / m) * (
                    m * g - gsum.reshape(shape) - xhat * gxhat_sum.reshape(shape)
                )
            return (
                gx,
                gxhat_sum if gamma.requires_grad else None,
                gsum if beta.requires_grad else None,
            )

        return make_result(out, (x, gamma, beta), backward)
    if mode != "eval":
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")
    inv = (1.0 / np.sqrt(stats.var + BN_EPS)).astype(x.dtype).reshape(shape)
    xhat = (x.data - stats.mean.reshape(shape)) * inv
    out = gam * xhat + beta.data.reshape(shape)

    def backward_eval(g):
        return (
            g * gam * inv if x.requires_grad else None,
            (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
            g.sum(axis=(0, 2, 3)) if beta.requires_grad else None,
        )

    return make_result(out, (x, gamma, beta), backward_eval)


# --------------------------------------------------------------------------
# resampling and pooling


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_rank(x, 4, "upsample_nearest input")
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)).reshape(
        n, c, h * factor, w * factor
    )

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ties go to the lowest flat index (stable sort on negated values).
    """
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def topk_mean(x: Tensor, k: int, return_indices: bool = False):
    """Mean of the ``k`` largest values along the last (flattened spatial) axis.

    ``x`` has shape N x C x HW; the result is N x C.
    """
    _check_rank(x, 3, "topk_mean input")
    hw = x.shape[-1]
    if int(k) != k or not 1 <= k <= hw:
        raise ConstraintError(f"k must satisfy 1 <= k <= HW; got k={k}, HW={hw}")
    k = int(k)
    idx = topk_indices(x.data, k)
    vals = np.take_along_axis(x.data, idx, axis=-1)
    out = vals.mean(axis=-1)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.repeat((g / k)[..., None], k, axis=-1), axis=-1)
        return (gx,)

    res = make_result(out, (x,), backward)
    return (res, idx) if return_indices else res


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(g.dtype),)

    return make_result(out, (x,), backward)


# --------------------------------------------------------------------------
# reductions and losses


def l1_mean(x: Tensor) -> Tensor:
    """Mean absolute value; subgradient sign(x)/numel with sign(0)=0."""
    if x.data.size == 0:
        raise ConfigurationError("l1_mean of an empty tensor")
    size = x.data.size
    out = np.asarray(np.abs(x.data).mean(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.sign(x.data) * (g / size),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    f = np.asarray(factor, dtype=x.dtype)
    return make_result(x.data * f, (x,), lambda g: (g * f,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    _check_rank(logits, 2, "softmax_ce logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at sample {bad[0]} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = np.asarray((logsum - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return make_result(out, (logits,), backward)


# --------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = np.array(x.data[idx])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[idx] += g
        return (gx,)

    return make_result(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_rank(a, 2, "matmul lhs")
    _check_rank(b, 2, "matmul rhs")
    return make_result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x`` (N x F) plus a per-column bias ``b`` (F)."""
    return make_result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))
