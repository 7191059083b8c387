"""Layer primitives: convolutions, pooling, batch norm, softmax, losses.

conv2d has two internal strategies.  float64 inputs use a sequential
tap-accumulation whose per-element rounding sequence is identical to a
plain nested-loop convolution (bias first, then taps in channel-major,
kernel-row, kernel-column order), so checking code can demand bitwise
equality against a brute-force oracle.  float32 inputs go through an
im2col view and BLAS matmul, which is what training runs on.
"""

import logging

import numpy as np

from ..errors import DimensionError, ParameterError, StateError
from .core import Tensor, record

log = logging.getLogger(__name__)


def _as4d(t: Tensor, op: str) -> np.ndarray:
    if t.data.ndim != 4:
        raise DimensionError(f"{op}: expected a 4-d NCHW tensor, got shape {t.data.shape}")
    return t.data


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """(N,C,kh,kw,Ho,Wo) sliding-window view of a padded NCHW array."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, kh, kw, ho, wo),
        (s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """2-d cross-correlation over NCHW input with FCkk weights."""
    xd = _as4d(x, "conv2d")
    wd = weight.data
    if wd.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-d, got {wd.shape}")
    n, c, h, w = xd.shape
    f, cw, kh, kw = wd.shape
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {cw}")
    if kh < 1 or kw < 1:
        raise ParameterError("conv2d: kernel dims must be >= 1")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ParameterError("conv2d: bad stride/padding/dilation")
    if h + 2 * padding < dilation * (kh - 1) + 1 or w + 2 * padding < dilation * (kw - 1) + 1:
        raise DimensionError(
            f"conv2d: kernel span exceeds padded input ({h}x{w}, pad {padding}, "
            f"k {kh}x{kw}, dilation {dilation})"
        )
    bd = None
    if bias is not None:
        bd = bias.data
        if bd.shape != (f,):
            raise DimensionError(f"conv2d: bias shape {bd.shape} != ({f},)")

    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(w, kw, stride, padding, dilation)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    if xd.dtype == np.float64:
        # reference path: accumulate taps sequentially in (c, i, j) order
        out = np.zeros((n, f, ho, wo), dtype=xd.dtype)
        if bd is not None:
            out += bd.reshape(1, f, 1, 1)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    xs = xp[
                        :, ci,
                        i * dilation : i * dilation + (ho - 1) * stride + 1 : stride,
                        j * dilation : j * dilation + (wo - 1) * stride + 1 : stride,
                    ]
                    out += xs[:, None] * wd[:, ci, i, j].reshape(1, f, 1, 1)
    else:
        cols = _windows(xp, kh, kw, stride, dilation, ho, wo)
        out = np.tensordot(wd, cols, axes=([1, 2, 3], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        if bd is not None:
            out += bd.reshape(1, f, 1, 1)

    def back(g):
        cols = _windows(xp, kh, kw, stride, dilation, ho, wo)
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(wd, g, axes=([0], [1]))  # (C,kh,kw,N,Ho,Wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :, :,
                    i * dilation : i * dilation + (ho - 1) * stride + 1 : stride,
                    j * dilation : j * dilation + (wo - 1) * stride + 1 : stride,
                ] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
        db = g.sum(axis=(0, 2, 3)) if bd is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", inputs, Tensor(out), back)


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution; weight layout (C_in, C_out, kh, kw)."""
    xd = _as4d(x, "conv_transpose2d")
    wd = weight.data
    if wd.ndim != 4:
        raise DimensionError(f"conv_transpose2d: weight must be 4-d, got {wd.shape}")
    n, c, h, w = xd.shape
    cw, f, kh, kw = wd.shape
    if cw != c:
        raise DimensionError(
            f"conv_transpose2d: input has {c} channels but weight expects {cw}"
        )
    if not 0 <= output_padding < stride:
        raise ParameterError(
            f"conv_transpose2d: output_padding {output_padding} must be in [0, stride)"
        )
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d: output would be empty")

    fh = (h - 1) * stride + kh + output_padding
    fw = (w - 1) * stride + kw + output_padding
    prod = np.tensordot(xd, wd, axes=([1], [0]))  # (N,H,W,F,kh,kw)
    full = np.zeros((n, f, fh, fw), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            full[
                :, :,
                i : i + (h - 1) * stride + 1 : stride,
                j : j + (w - 1) * stride + 1 : stride,
            ] += prod[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])

    def back(g):
        dfull = np.zeros((n, f, fh, fw), dtype=xd.dtype)
        dfull[:, :, padding : padding + ho, padding : padding + wo] = g
        cols = _windows(dfull, kh, kw, stride, 1, h, w)  # (N,F,kh,kw,H,W)
        # dx is exactly a conv2d gather of the upstream gradient
        dx = np.ascontiguousarray(
            np.tensordot(wd, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
        )
        dw = np.tensordot(xd, cols, axes=([0, 2, 3], [0, 4, 5]))
        return dx, dw

    return record("conv_transpose2d", (x, weight), Tensor(out), back)


def _pool_prepare(x: Tensor, k: int, stride, op: str):
    xd = _as4d(x, op)
    n, c, h, w = xd.shape
    stride = k if stride is None else stride
    if k > h or k > w:
        raise DimensionError(f"{op}: window {k} larger than input {h}x{w}")
    if stride < 1:
        raise ParameterError(f"{op}: stride must be >= 1")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = _windows(xd, k, k, stride, 1, ho, wo)
    flat = np.ascontiguousarray(cols.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, ho, wo, k * k)
    return xd, stride, ho, wo, flat


def _pool_scatter(shape, contrib, k, stride, ho, wo):
    """Spread per-window contributions (N,C,Ho,Wo,k*k) back onto the input."""
    n, c, h, w = shape
    dx = np.zeros(shape, dtype=contrib.dtype)
    if stride == k:
        block = contrib.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, : ho * k, : wo * k] = block.reshape(n, c, ho * k, wo * k)
    else:
        taps = np.arange(k * k)
        yidx = (np.arange(ho) * stride)[:, None, None] + (taps // k)[None, None, :]
        xidx = (np.arange(wo) * stride)[None, :, None] + (taps % k)[None, None, :]
        nidx = np.arange(n)[:, None, None, None, None]
        cidx = np.arange(c)[None, :, None, None, None]
        np.add.at(dx, (nidx, cidx, yidx[None, None], xidx[None, None]), contrib)
    return dx


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; backward routes gradient to the first row-major max."""
    xd, stride, ho, wo, flat = _pool_prepare(x, k, stride, "max_pool2d")
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = arg[..., None] == np.arange(k * k)
        contrib = onehot * g[..., None]
        return (_pool_scatter(xd.shape, contrib, k, stride, ho, wo),)

    return record("max_pool2d", (x,), Tensor(out), back)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    xd, stride, ho, wo, flat = _pool_prepare(x, k, stride, "avg_pool2d")
    out = flat.mean(axis=-1)

    def back(g):
        contrib = np.broadcast_to((g / (k * k))[..., None], g.shape + (k * k,))
        return (_pool_scatter(xd.shape, contrib, k, stride, ho, wo),)

    return record("avg_pool2d", (x,), Tensor(out), back)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean=None,
                 running_var=None, training: bool = True, momentum: float = 0.1,
                 eps: float = 1e-5, initialized: bool = True) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics and updates the running
    arrays in place (unbiased variance, like the usual convention); eval
    mode uses the running statistics and requires them to be initialized.
    """
    xd = _as4d(x, "batch_norm2d")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batch_norm2d: gamma/beta must have shape ({c},), got "
            f"{gamma.data.shape}/{beta.data.shape}"
        )
    gd = gamma.data.reshape(1, c, 1, 1)
    m = n * h * w

    if training:
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu.reshape(1, c, 1, 1)
        var = np.mean(xc * xc, axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(1, c, 1, 1)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            var_u = var * (m / (m - 1)) if m > 1 else var
            running_var *= 1.0 - momentum
            running_var += momentum * var_u
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)

        def back(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxh = g * gd
            s1 = dxh.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (dxh * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxh - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:
        if running_mean is None or running_var is None or not initialized:
            raise StateError("batch_norm2d: eval mode before any train step")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)

        def back(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = g * (gd * inv.reshape(1, c, 1, 1))
            return dx, dgamma, dbeta

    return record("batch_norm2d", (x, gamma, beta), Tensor(out.astype(xd.dtype, copy=False)), back)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the channel/class axis, max-subtracted for stability."""
    xd = x.data
    if xd.ndim < 2:
        raise DimensionError(f"softmax_channel: need a channel axis, got shape {xd.shape}")
    mx = xd.max(axis=1, keepdims=True)
    e = np.exp(xd - mx)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return record("softmax_channel", (x,), Tensor(y), back)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights=None,
                          ignore_index: int = 255, reduction: str = "mean") -> Tensor:
    """Pixel-wise weighted cross-entropy over softmax probabilities.

    ``labels`` is an integer (N,H,W) array; pixels equal to ``ignore_index``
    contribute nothing and are excluded from the mean's divisor.  Returns a
    scalar tensor; an all-ignore batch yields 0 with a logged warning.
    """
    xd = _as4d(logits, "softmax_cross_entropy")
    n, k, h, w = xd.shape
    if labels.shape != (n, h, w):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != {(n, h, w)}"
        )
    if reduction not in ("mean", "sum"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    valid = labels != ignore_index
    m = int(valid.sum())
    if m == 0:
        log.warning("softmax_cross_entropy: batch has no labelled pixels, loss = 0")
        return Tensor(np.zeros((), dtype=xd.dtype))

    weights = np.ones(k, dtype=xd.dtype) if class_weights is None else np.asarray(class_weights, dtype=xd.dtype)
    safe = np.where(valid, labels, 0).astype(np.intp)
    mx = xd.max(axis=1)
    lse = mx + np.log(np.exp(xd - mx[:, None]).sum(axis=1))
    picked = np.take_along_axis(xd, safe[:, None], axis=1)[:, 0]
    wmap = np.where(valid, weights[safe], 0).astype(xd.dtype)
    total = float((wmap * (lse - picked)).sum())
    denom = m if reduction == "mean" else 1
    out = Tensor(np.asarray(total / denom, dtype=xd.dtype))

    def back(g):
        p = np.exp(xd - lse[:, None])
        onehot = np.zeros_like(xd)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        onehot *= valid[:, None]
        dx = (p * valid[:, None] - onehot) * wmap[:, None] * (g / denom)
        return (dx.astype(xd.dtype, copy=False),)

    return record("softmax_cross_entropy", (logits,), out, back)
