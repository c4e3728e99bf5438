"""Layer primitives with exact backward passes.

Every op works on a leading batch axis: images are ``(N, C, H, W)``, vectors
``(N, D)``. ``*_forward`` returns ``(out, cache)``; ``*_backward`` takes the
upstream gradient and that cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x (N,C,H,W)`` with filters ``w (F,C,k,k)``."""
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, filters expect {cw}")
    if k != k2:
        raise ValueError("conv2d: filters must be square")
    xp = _pad(x, pad)
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError(f"conv2d: filter size {k} exceeds padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, k, k)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, xp, w, stride, pad)


def _conv_input_grad(dout, w, xp_shape, stride):
    """Adjoint of the convolution map w.r.t. its (padded) input."""
    n, f, ho, wo = dout.shape
    _, c, k, _ = w.shape
    dxp = np.zeros(xp_shape, dtype=np.result_type(dout, w))
    # (N, Ho, Wo, C, k, k)
    contrib = np.tensordot(dout.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp


def conv2d_backward(dout, cache):
    x_shape, xp, w, stride, pad = cache
    k = w.shape[2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, k, k)
    db = dout.sum(axis=(0, 2, 3))
    dxp = _conv_input_grad(dout, w, xp.shape, stride)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw, db


def transposed_conv_output_size(size, k, stride, pad):
    return (size - 1) * stride + k - 2 * pad


def transposed_conv_forward(x, w, b, stride=1, pad=0):
    """Adjoint of :func:`conv2d_forward` (plus bias).

    ``w`` has shape ``(C_in, C_out, k, k)``: the same tensor a convolution mapping
    ``C_out -> C_in`` channels would use.
    """
    n, c_in, h, wd = x.shape
    cw, c_out, k, _ = w.shape
    if c_in != cw:
        raise ValueError(f"transposed_conv: input has {c_in} channels, filters expect {cw}")
    hp = (h - 1) * stride + k
    wp = (wd - 1) * stride + k
    dxp = _conv_input_grad(x, w, (n, c_out, hp, wp), stride)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    out = dxp + b[None, :, None, None]
    return np.ascontiguousarray(out), (x, w, stride, pad)


def transposed_conv_backward(dout, cache):
    x, w, stride, pad = cache
    k = w.shape[2]
    dp = _pad(dout, pad)
    win = sliding_window_view(dp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # forward map is the input-adjoint of conv, so its input gradient is a conv
    dx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_in, C_out, k, k)
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def center_distance(h, w):
    """Euclidean distance of each position to the centre of an odd ``h x w`` map."""
    if h % 2 == 0 or w % 2 == 0:
        raise ValueError(f"spatial_weight needs odd spatial dims, got {h}x{w}")
    ys, xs = np.mgrid[0:h, 0:w]
    return np.hypot(ys - (h - 1) / 2, xs - (w - 1) / 2)


def spatial_weight_forward(x, a, b):
    """``y = x * (exp(a_d * dist) + b_d)`` per channel ``d``."""
    dist = center_distance(x.shape[2], x.shape[3])
    decay = np.exp(a[:, None, None] * dist[None])
    sw = decay + b[:, None, None]
    return x * sw[None], (x, dist, decay, sw)


def spatial_weight_backward(dout, cache):
    x, dist, decay, sw = cache
    gx = dout * x
    da = np.einsum("nchw,chw->c", gx, dist[None] * decay)
    db = gx.sum(axis=(0, 2, 3))
    return dout * sw[None], da, db


def _pool_windows(x, k, stride):
    n, c, h, w = x.shape
    if k != stride:
        raise ValueError("pooling supports kernel == stride only")
    if h % k or w % k:
        raise ValueError(f"pooling: spatial dims {h}x{w} not divisible by {k}")
    return x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // k, w // k, k * k)


def max_pool_forward(x, k=3, stride=3):
    win = _pool_windows(x, k, stride)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k)


def max_pool_backward(dout, cache):
    shape, arg, k = cache
    n, c, h, w = shape
    dwin = np.zeros((n, c, h // k, w // k, k * k), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def avg_pool_forward(x, k=3, stride=3):
    return _pool_windows(x, k, stride).mean(axis=-1), (x.shape, k)


def avg_pool_backward(dout, cache):
    shape, k = cache
    g = dout / (k * k)
    return np.repeat(np.repeat(g, k, axis=2), k, axis=3).reshape(shape)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()


def upsample_forward(x, factor=3):
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3), factor


def upsample_backward(dout, factor):
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      update_stats=True):
    """Per-channel normalisation. ``running_*`` arrays are updated in place."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            running_mean *= BN_MOMENTUM
            running_mean += (1 - BN_MOMENTUM) * mean
            running_var *= BN_MOMENTUM
            running_var += (1 - BN_MOMENTUM) * var
    elif mode == "inference":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv, gamma, axes, shape, mode)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, axes, shape, mode = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if mode == "inference":
        return dxhat * inv.reshape(shape), dgamma, dbeta
    m = dout.size / dgamma.size
    dx = (inv.reshape(shape) / m) * (m * dxhat - dxhat.sum(axis=axes).reshape(shape)
                                     - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    return dx, dgamma, dbeta


def dense_forward(x, w, b):
    """Affine map ``x @ w.T + b``; trailing input dims are flattened. ``w`` is ``(m, n)``."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ValueError(f"dense: input width {flat.shape[1]} != weight width {w.shape[1]}")
    return flat @ w.T + b, (x.shape, flat, w)


def dense_backward(dout, cache):
    shape, flat, w = cache
    return (dout @ w).reshape(shape), dout.T @ flat, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, y


def sigmoid_backward(dout, y):
    return dout * y * (1.0 - y)


# Unbatched conveniences matching the single-image signatures.

def conv2d(x, w, b, stride=1, pad=0):
    return conv2d_forward(x[None], w, b, stride, pad)[0][0]


def transposed_conv(x, w, b, stride=1, pad=0):
    return transposed_conv_forward(x[None], w, b, stride, pad)[0][0]


def spatial_weight(x, a, b):
    return spatial_weight_forward(x[None], a, b)[0][0]


def max_pool(x, k=3, stride=3):
    out, (_, arg, _) = max_pool_forward(x[None], k, stride)
    return out[0], arg[0]


def avg_pool(x, k=3, stride=3):
    return avg_pool_forward(x[None], k, stride)[0][0]


def global_avg_pool(x):
    return global_avg_pool_forward(x[None])[0][0]


def upsample(x, factor=3):
    return upsample_forward(x[None], factor)[0][0]


def dense(x, w, b):
    return dense_forward(np.asarray(x)[None], w, b)[0][0]


def relu(x):
    return np.maximum(x, 0)
