"""Differentiable operators on :class:`Tensor`: 3D convolution, batch
normalization, pooling and the losses used by the detection head."""

import numpy as np

from lgrnet import kernels
from lgrnet.errors import InvalidArgument
from lgrnet.nncore.tensor import Tensor, as_tensor


# elements per im2col chunk (64 MB at float32)
COL_BUDGET = 1 << 24


def _out_shape(spatial, k, padding):
    return tuple(n + 2 * padding - k + 1 for n in spatial)


def conv3d_cl(x, weight, bias=None, padding=0):
    """Stride-1 3D cross-correlation on channels-last input.

    x: B x D x H x W x C_in, weight: C_out x C_in x k x k x k, bias: C_out.
    Returns B x D' x H' x W' x C_out. Patch extraction runs in the active
    kernel backend.
    """
    x = as_tensor(x)
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise InvalidArgument("only cubic kernels are supported")
    if x.ndim != 5 or x.shape[4] != cin:
        raise InvalidArgument(f"conv3d expects B x D x H x W x {cin} input, got {x.shape}")
    if min(x.shape[1:4]) + 2 * padding < k:
        raise InvalidArgument("kernel larger than padded input")
    b = x.shape[0]
    out_sp = _out_shape(x.shape[1:4], k, padding)
    xd = np.ascontiguousarray(x.data)
    w2 = np.ascontiguousarray(weight.data.transpose(2, 3, 4, 1, 0).reshape(-1, cout))
    pointwise = k == 1 and padding == 0
    vox = out_sp[0] * out_sp[1] * out_sp[2]
    step = max(1, COL_BUDGET // (vox * k ** 3 * cin))

    def columns(s):
        # patch matrix for batch items s .. s + step; rebuilt in backward
        # rather than cached, which bounds memory by COL_BUDGET
        xs = xd[s:s + step]
        if pointwise:
            return xs.reshape(-1, cin)
        cols = np.empty((xs.shape[0] * vox, k ** 3 * cin), dtype=xd.dtype)
        kernels.get_backend().im2col3d(xs, k, padding, cols)
        return cols

    out = np.empty((b * vox, cout), dtype=np.result_type(xd, w2))
    for s in range(0, b, step):
        np.matmul(columns(s), w2, out=out[s * vox:(s + step) * vox])
    if bias is not None:
        out += bias.data
    out_data = out.reshape((b,) + out_sp + (cout,))

    def backward(g):
        g2 = g.reshape(-1, cout)
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        need_w, need_x = weight.requires_grad, x.requires_grad
        if not (need_w or need_x):
            return
        dw = np.zeros_like(w2) if need_w else None
        dx = np.zeros(x.shape, dtype=g2.dtype) if need_x else None
        for s in range(0, b, step):
            gs = g2[s * vox:(s + step) * vox]
            if need_w:
                dw += columns(s).T @ gs
            if need_x:
                dcols = gs @ w2.T
                if pointwise:
                    dx[s:s + step] = dcols.reshape(dx[s:s + step].shape)
                else:
                    kernels.get_backend().col2im3d(dcols, k, padding, dx[s:s + step])
        if need_w:
            weight._accum(dw.reshape(k, k, k, cin, cout).transpose(4, 3, 0, 1, 2))
        if need_x:
            x._accum(dx)

    return Tensor._make(out_data, (x, weight, bias), backward, "conv3d")


def conv3d(x, weight, bias=None, padding=0):
    """Stride-1 3D cross-correlation with zero padding.

    x: B x C_in x D x H x W, weight: C_out x C_in x k x k x k, bias: C_out.
    """
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise InvalidArgument(
            f"conv3d expects B x {weight.shape[1]} x D x H x W input, got {x.shape}")
    out = conv3d_cl(x.transpose(0, 2, 3, 4, 1), weight, bias, padding)
    return out.transpose(0, 4, 1, 2, 3)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9,
               eps=1e-5, axis=1):
    """Per-channel normalization over every axis except ``axis``.

    In training mode the running statistics (numpy arrays) are updated in place
    as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    if training:
        n = x.data.size // x.shape[axis]
        mean = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out_data = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta._accum(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=red, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=red, keepdims=True)
                dx = (dxhat - s1 / n - xhat * (s2 / n)) * inv.reshape(bshape)
            else:
                dx = dxhat * inv.reshape(bshape)
            x._accum(dx)

    return Tensor._make(out_data, (x, gamma, beta), backward, "batch_norm")


def relu(x):
    return as_tensor(x).relu()


def max_along(x, axis):
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out_data = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        x._accum(full)

    return Tensor._make(out_data, (x,), backward, "max_along")


def global_max_pool(x, channels_last=False):
    """B x C x D x H x W -> B x C (or B x D x H x W x C when ``channels_last``);
    ties resolve to the first voxel in row-major order."""
    x = as_tensor(x)
    b = x.shape[0]
    if channels_last:
        return max_along(x.reshape(b, -1, x.shape[-1]), axis=1)
    return max_along(x.reshape(b, x.shape[1], -1), axis=2)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        x._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (x,), backward, "log_softmax")


def softmax(x, axis=-1):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, target, weight=None):
    """Weighted mean negative log-likelihood over all leading positions.

    logits: ... x K, target: integer array shaped like ``logits[..., 0]``.
    Returns 0 when the weights sum to zero.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    k = logits.shape[-1]
    onehot = np.eye(k, dtype=logits.dtype)[target]
    w = np.ones(target.shape, dtype=logits.dtype) if weight is None else np.asarray(
        weight, dtype=logits.dtype)
    denom = float(w.sum())
    if denom <= 0:
        return (logp * 0.0).sum()
    return (logp * (onehot * (-w / denom)[..., None])).sum()


def smooth_l1(diff, beta=1.0):
    """Elementwise Huber penalty: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    diff = as_tensor(diff)
    a = np.abs(diff.data)
    quad = a < beta
    out_data = np.where(quad, 0.5 * diff.data ** 2 / beta, a - 0.5 * beta).astype(diff.dtype)

    def backward(g):
        diff._accum(g * np.where(quad, diff.data / beta, np.sign(diff.data)))

    return Tensor._make(out_data, (diff,), backward, "smooth_l1")


def weighted_mean(x, weight):
    """sum(weight * x) / sum(weight); zero when the weights vanish."""
    x = as_tensor(x)
    w = np.asarray(weight, dtype=x.dtype)
    while w.ndim < x.ndim:
        w = w[..., None]
    denom = float(np.broadcast_to(w, x.shape).sum())
    if denom <= 0:
        return (x * 0.0).sum()
    return (x * (w / denom)).sum()
