"""Differentiable operations over :class:`Tensor`.

Every op validates shapes eagerly and raises ``ValueError`` naming the
offending shapes. Image tensors are NCHW; convolution is cross-correlation.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = as_tensor(a)
    f = a.data.dtype.type(factor)
    return make_result("scale", a.data * f, (a,), lambda g: (g * f,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_result("sum", np.sum(a.data), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return make_result("mean", np.mean(a.data), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), backward)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape N x F."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result("dense", out, parents, backward)


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise ValueError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result("concat", out, tuple(tensors), backward)


# -- activations ------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result("relu", np.maximum(x.data, 0), (x,),
                       lambda g: (g * mask,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- losses -----------------------------------------------------------------

def log_softmax_np(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    s = softmax_np(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result("softmax", s, (x,), backward)


def _check_one_hot(t, shape):
    if t.shape != shape:
        raise ValueError(f"targets {t.shape} do not match logits {shape}")
    ok = np.all((t == 0) | (t == 1), axis=1) & (t.sum(axis=1) == 1)
    if not ok.all():
        row = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"target row {row} is not one-hot")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be N x K with K >= 2, got {logits.shape}")
    _check_one_hot(t, logits.shape)
    t = t.astype(logits.dtype)
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    loss = -(logp * t).sum() / n

    def backward(g):
        return (g * (np.exp(logp) - t) / n,)

    return make_result("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype),
                       (logits,), backward)


# -- convolution ------------------------------------------------------------

def conv_output_extent(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, kernel, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} padding={padding} dilation={dilation}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = conv_output_extent(h, kh, stride, padding, dilation)
    wo = conv_output_extent(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: input {x.shape} with kernel {kernel.shape} gives non-positive "
            f"output extent {ho}x{wo}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")

    # channel-major copy so every tap gathers into one (C*K*K, N*H'*W') matrix
    xc = x.data.transpose(1, 0, 2, 3)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xc = np.ascontiguousarray(xc)

    def window(i, j):
        r, s = i * dilation, j * dilation
        return (slice(None), slice(None),
                slice(r, r + stride * (ho - 1) + 1, stride),
                slice(s, s + stride * (wo - 1) + 1, stride))

    def columns():
        if kh == kw == 1 and stride == 1:
            return xc.reshape(c, -1)
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xc[window(i, j)]
        return cols.reshape(c * kh * kw, -1)

    wk = kernel.data
    w2 = wk.reshape(o, -1)
    out = (w2 @ columns()).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gk = (g2 @ columns().T).reshape(wk.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxc = np.zeros_like(xc)
            for i in range(kh):
                for j in range(kw):
                    gxc[window(i, j)] += gcols[:, i, j]
            if padding:
                gxc = gxc[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxc.transpose(1, 0, 2, 3))
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", out, parents, backward)


# -- normalization ----------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis but the channel axis (axis 1).

    Accepts N x C or N x C x H x W input. ``running_mean`` and ``running_var``
    are numpy buffers updated in place during training:
    ``running = (1 - momentum) * running + momentum * batch_stat``, with the
    unbiased batch variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects N x C or NCHW input, got {x.shape}")
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data),
                       ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise ValueError(f"batch_norm: {label} shape {np.shape(arr)} != ({c},)")
    if eps <= 0:
        raise ValueError("batch_norm epsilon must be positive")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c
    dt = x.dtype.type

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = (inv_std.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_result("batch_norm", out, (x, gamma, beta), backward)


# -- pooling ----------------------------------------------------------------

def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return make_result("global_avg_pool", out, (x,), backward)


def max_pool2d(x, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Windowed maximum; gradient goes to the first maximal element in
    row-major window order."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects NCHW input, got {x.shape}")
    if window < 1 or stride < 1 or padding < 0:
        raise ValueError(f"max_pool2d: bad window={window} stride={stride}")
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ValueError(f"max_pool2d: window {window} larger than input {x.shape}")
    ho = (h + 2 * padding - window) // stride + 1
    wo = (w + 2 * padding - window) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)

    def win(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    out = xp[win(0, 0)].copy()
    for i in range(window):
        for j in range(window):
            if i or j:
                np.maximum(out, xp[win(i, j)], out=out)

    def backward(g):
        gx = np.zeros(xp.shape, dtype=x.dtype)
        # the first tap (row-major) equal to the maximum takes the gradient
        free = np.ones(out.shape, dtype=bool)
        for i in range(window):
            for j in range(window):
                hit = (xp[win(i, j)] == out) & free
                free &= ~hit
                gx[win(i, j)] += g * hit
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return (gx,)

    return make_result("max_pool2d", out, (x,), backward)


def pool(x, kind: str, window: int | None = None, stride: int | None = None,
         padding: int = 0) -> Tensor:
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind == "max":
        if window is None:
            raise ValueError("max pooling needs a window")
        return max_pool2d(x, window, stride, padding)
    raise ValueError(f"unknown pool kind {kind!r}")

