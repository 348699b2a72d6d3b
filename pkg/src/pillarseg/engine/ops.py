"""Differentiable primitives.

Spatial tensors are channel-last, ``(..., W, H, C)``; any leading axes are
treated as batch axes. All gradients are exact (no approximations), so every
op can be checked against central differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import OddDimension, ShapeMismatch
from .tensor import Tensor, as_tensor, make_node

# Activation-pattern recorder used to detect kinks in gradient checks.
_KINKS: Optional[list] = None


@contextlib.contextmanager
def record_kinks():
    """Collect the branch decisions (ReLU signs, max winners) taken inside the block."""
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _record(pattern: np.ndarray) -> None:
    if _KINKS is not None:
        _KINKS.append(pattern.copy())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def sum(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = max(x.size, 1)
    return make_node(np.asarray(x.data.mean() if x.size else 0.0), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def stack(xs: list) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return make_node(np.stack([x.data for x in xs]), xs, lambda g: tuple(g[i] for i in range(len(xs))), "stack")


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    _record(active)
    return make_node(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


# --- dense layers --------------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(d_in, d_out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    d_in, d_out = weight.shape
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise ShapeMismatch(f"linear: bias {bias.shape} does not match d_out={d_out}")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        grads = [g @ weight.data.T, x.data.reshape(-1, d_in).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, bw, "linear")


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 'same' convolution, zero padding ``k // 2``.

    ``x`` is ``(..., W, H, C_in)``, ``kernel`` is ``(k, k, C_in, C_out)`` with
    odd ``k``; ``y[w, h] = sum_ab xpad[w + a, h + b] @ kernel[a, b]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be (k, k, cin, cout) with odd k, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[2]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    k = kernel.shape[0]
    p = k // 2
    W, H = x.shape[-3], x.shape[-2]
    lead = x.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(p, p), (p, p), (0, 0)]
    xpad = np.pad(x.data, pad) if p else x.data
    K = kernel.data
    out = np.zeros(lead + (W, H, K.shape[3]))
    for a in range(k):
        for b in range(k):
            out += xpad[..., a : a + W, b : b + H, :] @ K[a, b]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (K.shape[3],):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} does not match c_out={K.shape[3]}")
        out += bias.data
        parents.append(bias)

    def bw(g):
        gx = np.zeros_like(xpad) if x.requires_grad else None
        gk = np.zeros_like(K) if kernel.requires_grad else None
        g2 = g.reshape(-1, K.shape[3])
        for a in range(k):
            for b in range(k):
                if gx is not None:
                    gx[..., a : a + W, b : b + H, :] += g @ K[a, b].T
                if gk is not None:
                    win = xpad[..., a : a + W, b : b + H, :]
                    gk[a, b] = win.reshape(-1, K.shape[2]).T @ g2
        if gx is not None and p:
            gx = gx[..., p : p + W, p : p + H, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, bw, f"conv{k}x{k}")


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first window element."""
    x = as_tensor(x)
    W, H, C = x.shape[-3:]
    if W % 2 or H % 2:
        raise OddDimension(f"maxpool2 needs even spatial dims, got {W}x{H}")
    lead = x.shape[:-3]
    nl = len(lead)
    blocks = x.data.reshape(lead + (W // 2, 2, H // 2, 2, C))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    win = blocks.transpose(perm).reshape(lead + (W // 2, H // 2, C, 4))
    idx = win.argmax(axis=-1)
    _record(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(lead + (W // 2, H // 2, C, 2, 2))
        inv = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
        return (gwin.transpose(inv).reshape(x.shape),)

    return make_node(out, (x,), bw, "maxpool2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two spatial axes."""
    x = as_tensor(x)
    W, H, C = x.shape[-3:]
    out = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)
    lead = x.shape[:-3]

    def bw(g):
        return (g.reshape(lead + (W, 2, H, 2, C)).sum(axis=(-4, -2)),)

    return make_node(out, (x,), bw, "upsample2")


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat: leading shapes differ, {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    return make_node(
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (g[..., :ca], g[..., ca:]),
        "concat",
    )


def pad_spatial(x, pad_w: tuple[int, int], pad_h: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    lead = x.ndim - 3
    widths = [(0, 0)] * lead + [pad_w, pad_h, (0, 0)]
    W, H = x.shape[-3], x.shape[-2]
    return make_node(
        np.pad(x.data, widths),
        (x,),
        lambda g: (g[..., pad_w[0] : pad_w[0] + W, pad_h[0] : pad_h[0] + H, :],),
        "pad",
    )


def crop_spatial(x, start: tuple[int, int], size: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    (i0, j0), (w, h) = start, size

    def bw(g):
        gx = np.zeros(x.shape)
        gx[..., i0 : i0 + w, j0 : j0 + h, :] = g
        return (gx,)

    return make_node(x.data[..., i0 : i0 + w, j0 : j0 + h, :].copy(), (x,), bw, "crop")


def max_over_axis(x, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max along ``axis`` ignoring entries where ``mask`` is False.

    Masked entries count as ``-inf``; slices without any valid entry yield 0
    and pass no gradient. The gradient goes to one winner, the lowest index
    among ties.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    vals = np.where(mask, x.data, -np.inf)
    idx = np.expand_dims(vals.argmax(axis=axis), axis)
    valid = np.take_along_axis(mask, idx, axis=axis)
    _record(np.where(valid, idx, -1))
    out = np.where(valid, np.take_along_axis(x.data, idx, axis=axis), 0.0)

    def bw(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, np.where(valid, np.expand_dims(g, axis), 0.0), axis=axis)
        return (gx,)

    return make_node(np.squeeze(out, axis=axis), (x,), bw, "masked_max")


def place(x, index: tuple[np.ndarray, ...], out_shape: tuple[int, ...]) -> Tensor:
    """Write rows of ``x`` (``(m, C)``) to ``out[index]`` in a zero tensor.

    ``index`` is a tuple of integer arrays addressing the leading axes of
    ``out_shape``; targets must be distinct.
    """
    x = as_tensor(x)
    out = np.zeros(out_shape)
    out[index] = x.data
    return make_node(out, (x,), lambda g: (g[index],), "place")


def take_rows(x, rows: np.ndarray) -> Tensor:
    """``x[rows]`` along the first axis."""
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, rows, g)
        return (gx,)

    return make_node(x.data[rows], (x,), bw, "take_rows")


# --- normalisation ---------------------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(
    x,
    gamma,
    beta,
    state: BatchNormState,
    train: bool,
    mask: Optional[np.ndarray] = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """BatchNorm over every axis except the last (channel) axis.

    In training mode the batch statistics use only entries selected by
    ``mask`` (shape ``x.shape[:-1]``); the running statistics are updated
    with ``momentum`` (unbiased variance). Evaluation mode uses the running
    statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,) or state.running_mean.shape != (C,):
        raise ShapeMismatch(f"batchnorm: {C} channels but parameters {gamma.shape}, {beta.shape}")
    xs = x.data.reshape(-1, C)
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xs - state.running_mean) * inv
        out = (xhat * gamma.data + beta.data).reshape(x.shape)

        def bw_eval(g):
            g2 = g.reshape(-1, C)
            return ((g2 * (gamma.data * inv)).reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0))

        return make_node(out, (x, gamma, beta), bw_eval, "batchnorm_eval")

    if mask is None:
        m = np.ones(xs.shape[0], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if m.shape[0] != xs.shape[0]:
            raise ShapeMismatch(f"batchnorm: mask {np.shape(mask)} does not match input {x.shape[:-1]}")
    n = int(m.sum())
    if n:
        sel = xs[m]
        mu = sel.mean(axis=0)
        var = ((sel - mu) ** 2).mean(axis=0)
        state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var[:] = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        mu = np.zeros(C)
        var = np.zeros(C)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xs - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    mf = m[:, None].astype(np.float64)

    def bw_train(g):
        g2 = g.reshape(-1, C)
        gh = g2 * gamma.data
        gx = gh * inv
        if n:
            gx = gx - mf * (inv / n) * (gh.sum(axis=0) + xhat * (gh * xhat).sum(axis=0))
        return (gx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0))

    return make_node(out, (x, gamma, beta), bw_train, "batchnorm_train")


# --- softmax / losses -------------------------------------------------------------

def softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def log_softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def weighted_cross_entropy(logits, target: np.ndarray, class_weights: np.ndarray, ignore_index: int = 255) -> Tensor:
    """``-(1/M) * sum_i w[t_i] * log softmax(logits_i)[t_i]`` over labelled cells.

    ``M`` is the number of cells whose target differs from ``ignore_index``;
    with ``M == 0`` the loss is 0 with zero gradient.
    """
    logits = as_tensor(logits)
    K = logits.shape[-1]
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"cross entropy: target {target.shape} vs logits {logits.shape}")
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (K,):
        raise ShapeMismatch(f"cross entropy: {w.shape[0] if w.ndim else 0} weights for {K} classes")
    labelled = target != ignore_index
    M = int(labelled.sum())
    flat = logits.data.reshape(-1, K)
    t = np.where(labelled, target, 0).reshape(-1).astype(np.int64)
    lab = labelled.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    cw = np.where(lab, w[t], 0.0)
    if M == 0:
        return make_node(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),), "wce")
    picked = logp[np.arange(flat.shape[0]), t]
    loss = -((cw * picked)[lab].sum()) * (1.0 / M)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(flat.shape[0]), t] -= 1.0
        return ((p * (cw * (g / M))[:, None]).reshape(logits.shape),)

    return make_node(np.asarray(loss), (logits,), bw, "wce")
