"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def _as_scalar(out, weights):
    data = out.data
    if data.size == 1:
        return float(data.reshape(())), None
    return float(np.sum(data * weights)), weights


def grad_check(fn, inputs, h=1e-5, samples=None, seed=0):
    """Largest relative error between backprop and central differences.

    ``fn`` maps the tensors in ``inputs`` (one Tensor or a sequence) to an
    output Tensor. Non-scalar outputs are contracted with a fixed random
    weighting so one backward pass covers every output element. ``samples``
    limits how many coordinates per input are perturbed (all when None).

    The step actually applied is recovered from the perturbed values, and
    the output difference is taken elementwise before contraction, which
    keeps the rounding floor near machine epsilon.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    weights = None
    if out.size != 1:
        weights = rng.standard_normal(out.shape)
        from .ops import mul, sum as tsum
        loss = tsum(mul(out, Tensor(weights)))
    else:
        loss = out
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if samples is None or samples >= n else rng.choice(
            n, size=samples, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            plus_x = flat[k]
            with no_grad():
                plus = fn(*inputs).data.copy()
            flat[k] = orig - h
            minus_x = flat[k]
            with no_grad():
                minus = fn(*inputs).data.copy()
            flat[k] = orig
            diff = plus - minus
            if weights is not None:
                diff = diff * weights
            numeric = float(np.sum(diff)) / (plus_x - minus_x)
            exact = float(a.reshape(-1)[k])
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
