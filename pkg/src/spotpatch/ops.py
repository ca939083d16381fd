"""Differentiable operations on :class:`~spotpatch.tensor.Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ArgumentError, DimensionError
from .tensor import Tensor, as_tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    dtype = np.result_type(a.dtype, b.dtype)
    if a.dtype != dtype and not a.requires_grad:
        a = Tensor(a.data.astype(dtype))
    if b.dtype != dtype and not b.requires_grad:
        b = Tensor(b.data.astype(dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)

    def backward(g):
        return (g * c,)

    return Tensor._from_op(x.data * c, (x,), backward, "scale")


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=False)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(reduce_sum(x), 1.0 / max(x.size, 1))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._from_op(x.data.transpose(axes), (x,), backward, "permute")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,kh,kw]`` (no bias)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ArgumentError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    N, C, H, W = x.shape
    K, _, kh, kw = w.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {(N, C, Hp, Wp)}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(K, C * kh * kw)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, K)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gcols = (gmat @ wmat).reshape(N, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw

    return Tensor._from_op(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, x.dtype.type(0)), (x,), backward, "relu")


def sigmoid_np(r: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on arrays."""
    r = np.asarray(r)
    out = np.empty_like(r, dtype=np.result_type(r.dtype, np.float32))
    pos = r >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-r[pos]))
    e = np.exp(r[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def binarize_ste(r) -> Tensor:
    """Hard threshold (``r >= 0`` -> 1) whose gradient is the sigmoid's."""
    r = as_tensor(r)
    out = (r.data >= 0).astype(r.dtype)

    def backward(g):
        s = sigmoid_np(r.data)
        return (g * (s * (1 - s)),)

    return Tensor._from_op(out, (r,), backward, "binarize_ste")


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over axis 1 of ``x[N,C]`` or ``x[N,C,H,W]``.

    In training mode the batch statistics normalize the input and the running
    arrays are updated in place: ``running = momentum*running + (1-momentum)*batch``
    (biased batch variance). In eval mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects [N,C] or [N,C,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm: {C} channels but scale {gamma.shape}, shift {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    dt = x.dtype.type

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (dt(1) / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // C

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``logits[M,C]`` against integer ``labels[M]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    M, C = logits.shape
    if M == 0:
        raise ArgumentError("softmax_cross_entropy needs at least one row")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ArgumentError(f"label index out of range [0, {C})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(M), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(M), labels] -= 1
        return (p * (g / M),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward,
                           "softmax_cross_entropy")


def smooth_l1(pred, target, weights=None) -> Tensor:
    """Smooth-L1 (Huber, beta=1) summed over the last axis, averaged over rows.

    With ``weights`` (one per row), rows are weighted and the sum is divided by
    the number of rows with nonzero weight; the result is 0 when there are none.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    if pred.ndim == 1:
        rows = pred.shape[0]
        w = np.ones(rows, dtype=pred.dtype) if weights is None else np.asarray(weights, pred.dtype)
        wfull = w
    else:
        rows = pred.shape[0]
        w = np.ones(rows, dtype=pred.dtype) if weights is None else np.asarray(weights, pred.dtype)
        wfull = w.reshape((rows,) + (1,) * (pred.ndim - 1))
    count = int(np.count_nonzero(w))
    d = pred.data - target
    ad = np.abs(d)
    elem = np.where(ad < 1, 0.5 * d * d, ad - 0.5)
    denom = pred.dtype.type(max(count, 1))
    loss = (elem * wfull).sum() / denom if count else pred.dtype.type(0)

    def backward(g):
        if not count:
            return (np.zeros_like(pred.data),)
        return (np.clip(d, -1, 1) * wfull * (g / denom),)

    return Tensor._from_op(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "smooth_l1")


def columns(x, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-d tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"columns expects a 2-d tensor, got {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward, "columns")
