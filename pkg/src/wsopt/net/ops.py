"""Array-level layer operations with explicit backward passes.

Each forward returns (output, cache); the matching backward consumes the
cache and the upstream gradient. Convolutions are stride 1 only (the network
never strides); spatial reduction happens in 2x2 average pooling. The
convolution is computed as a sum of shifted channel-mixing matmuls, which
keeps peak memory at one (N, C, H, W) temporary instead of an im2col matrix.
"""

from __future__ import annotations

import numpy as np

# When enabled (tests, the gradcheck command), every op output is checked for
# NaN/Inf and failures raise immediately.
NAN_CHECKS = False


class ShapeError(ValueError):
    pass


def _check_finite(name: str, arr: np.ndarray) -> None:
    if NAN_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {name}")


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int):
    """Stride-1 2-D convolution (cross-correlation), zero padding `pad`.

    x: (N, C, H, W); w: (OC, C, KH, KW); b: (OC,). Output spatial size is
    H + 2*pad - KH + 1, so KH=3/pad=1 and KH=1/pad=0 both preserve size.

    KxK kernels use an implicit-GEMM scheme over the flattened padded image:
    shifting a kernel tap by (i, j) is a constant offset in flat index space,
    so each tap contributes one matmul against a contiguous slice of the flat
    buffer (BLAS absorbs the row stride as the leading dimension) and no
    im2col copy is ever materialized. Row-wrap positions produce junk output
    columns that the final reshape discards; the buffer carries kw-1 zero
    tail elements so the last taps may read past the image harmlessly.
    """
    n, c, h, wd = x.shape
    oc, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    oh = h + 2 * pad - kh + 1
    ow = wd + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd}")
    if kh == 1 and kw == 1 and pad == 0:
        y = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd))
        y = y.reshape(n, oc, oh, ow) + b[None, :, None, None]
        _check_finite("conv2d", y)
        return y, (x, x.shape, w.shape, pad)
    hp, wp = h + 2 * pad, wd + 2 * pad
    area = hp * wp
    buf = np.zeros((n, c, area + kw - 1), dtype=x.dtype)
    buf[:, :, :area].reshape(n, c, hp, wp)[:, :, pad : pad + h, pad : pad + wd] = x
    span = oh * wp
    y = np.zeros((n, oc, span), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            y += np.matmul(np.ascontiguousarray(w[:, :, i, j]), buf[:, :, s : s + span])
    y = y.reshape(n, oc, oh, wp)[:, :, :, :ow] + b[None, :, None, None]
    _check_finite("conv2d", y)
    return y, (buf, x.shape, w.shape, pad)


def conv2d_backward(dy: np.ndarray, w: np.ndarray, cache):
    """Returns (dx, dw, db) for conv2d."""
    buf, x_shape, w_shape, pad = cache
    n, c, h, wd = x_shape
    oc, _, kh, kw = w_shape
    _, _, oh, ow = dy.shape
    dw = np.empty(w_shape, dtype=dy.dtype)
    db = dy.sum(axis=(0, 2, 3))
    if kh == 1 and kw == 1 and pad == 0:
        dy2 = np.ascontiguousarray(dy.reshape(n, oc, oh * ow))
        x2 = buf.reshape(n, c, h * wd)
        dw[:, :, 0, 0] = np.matmul(dy2, x2.transpose(0, 2, 1)).sum(axis=0)
        dx = np.matmul(np.ascontiguousarray(w[:, :, 0, 0].T), dy2).reshape(n, c, h, wd)
        _check_finite("conv2d_backward", dx)
        return dx, dw, db
    hp, wp = h + 2 * pad, wd + 2 * pad
    area = hp * wp
    span = oh * wp
    # embed dy in oh x wp rows; the junk columns stay zero so the overrun
    # positions of the flat-buffer scheme contribute nothing
    dy_slab = np.zeros((n, oc, oh, wp), dtype=dy.dtype)
    dy_slab[:, :, :, :ow] = dy
    dy_slab = dy_slab.reshape(n, oc, span)
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            xs = buf[:, :, s : s + span]
            dw[:, :, i, j] = np.matmul(dy_slab, xs.transpose(0, 2, 1)).sum(axis=0)
    # dx is itself a correlation of the (flipped) kernel with dy: run the
    # same flat-slab gather on a padded dy buffer so every accumulation is
    # a contiguous matmul add instead of a strided scatter
    gh, gw = kh - 1, kw - 1  # full-correlation padding
    ghp, gwp = oh + 2 * gh, ow + 2 * gw
    garea = ghp * gwp
    gbuf = np.zeros((n, oc, garea + kw - 1), dtype=dy.dtype)
    gbuf[:, :, :garea].reshape(n, oc, ghp, gwp)[:, :, gh : gh + oh, gw : gw + ow] = dy
    gspan = hp * gwp
    dxs = np.zeros((n, c, gspan), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            s = i * gwp + j
            wk = np.ascontiguousarray(w[:, :, kh - 1 - i, kw - 1 - j].T)
            dxs += np.matmul(wk, gbuf[:, :, s : s + gspan])
    dxp = dxs.reshape(n, c, hp, gwp)[:, :, :, :wp]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd]
    dx = np.ascontiguousarray(dx)
    _check_finite("conv2d_backward", dx)
    return dx, dw, db


def relu(x: np.ndarray):
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x > 0
    return np.maximum(x, x.dtype.type(0)), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def avgpool2(x: np.ndarray):
    """2x2 average pooling, stride 2. Spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: odd spatial size {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    _check_finite("avgpool2", y)
    return y, x.shape


def avgpool2_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    quarter = (dy / dy.dtype.type(4))[:, :, :, None, :, None]
    return np.broadcast_to(quarter, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w)


def global_avgpool(x: np.ndarray):
    """Mean over the spatial dims: (N, C, H, W) -> (N, C)."""
    y = x.mean(axis=(2, 3))
    _check_finite("global_avgpool", y)
    return y, x.shape


def global_avgpool_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    scale = dy.dtype.type(1.0 / (h * w))
    return np.broadcast_to((dy * scale)[:, :, None, None], x_shape).copy()


def fc(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Fully connected (N, C) -> (N,) single-logit head. w: (C,), b: (1,)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"fc: input has {x.shape[1]} features, weights expect {w.shape[0]}")
    y = x @ w + b[0]
    _check_finite("fc", y)
    return y, x


def fc_backward(dy: np.ndarray, w: np.ndarray, x: np.ndarray):
    """Returns (dx, dw, db)."""
    dw = x.T @ dy
    db = np.array([dy.sum()], dtype=dy.dtype)
    dx = np.outer(dy, w)
    return dx, dw, db


def concat_channels(parts):
    """Concatenate along channel axis; cache is the channel split points."""
    y = np.concatenate(parts, axis=1)
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]
    return y, bounds


def concat_channels_backward(dy: np.ndarray, bounds) -> list:
    """Split the upstream gradient back into per-part channel ranges."""
    return np.split(dy, bounds, axis=1)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, labels: np.ndarray):
    """Per-sample binary cross-entropy on raw logits.

    Stable form: loss = max(z, 0) - z*y + log(1 + exp(-|z|)); the per-logit
    gradient is sigmoid(z) - y. Returns (losses, dlogits), both shape (N,).
    """
    z = logits
    y = labels.astype(z.dtype)
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    dlogits = sigmoid(z).astype(z.dtype) - y
    _check_finite("bce_with_logits", losses)
    return losses, dlogits
