"""The float64 finite-difference suite behind ``fracbam gradcheck``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import BamParams, bam_refine, channel_gate, spatial_gate
from .autodiff import Tensor, grad_check, ops

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _t(rng, *shape, scale=1.0, offset=0.0):
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)


def _bn_case(rng, shape, training):
    c = shape[1]
    x = _t(rng, *shape, offset=0.3)
    gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
    beta = _t(rng, c, scale=0.5)
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 1.5, c)
    return (lambda x, g, b: ops.batch_norm(x, g, b, mean.copy(), var.copy(), training),
            [x, gamma, beta])


def straddle_relu(params: BamParams, feature):
    """Set the channel-gate hidden bias so every hidden unit is active for
    some samples and inactive for others.

    If a unit were active for the whole batch, the batch norm after the
    bottleneck would cancel its bias exactly, leaving a true gradient of 0
    that finite differences can only resolve as rounding noise.
    """
    pre = feature.mean(axis=(2, 3)) @ params.weights["channel.fc1.weight"].data
    pre = np.sort(pre, axis=0)
    params.weights["channel.fc1.bias"].data = -(pre[0] + pre[1]) / 2


def _bam_case(rng, gate, training):
    params = BamParams.create(8, 4, 2, rng, np.float64)
    for name, t in params.weights.items():
        if name.endswith(".gamma"):
            t.data = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith((".beta", ".bias")):
            t.data = rng.standard_normal(t.shape) * 0.5
    for name, buf in params.buffers.items():
        var = name.endswith("var")
        buf[:] = rng.uniform(0.5, 1.5, buf.shape) if var else rng.standard_normal(buf.shape)
    f = Tensor(rng.standard_normal((3, 8, 9, 9)) + np.array([-1.5, 0.0, 1.5])[:, None, None, None])
    straddle_relu(params, f.data)
    names = list(params.weights)

    def fn(f, *ws):
        params.weights.update(zip(names, ws))
        return gate(f, params, training)

    return fn, [f] + [params.weights[n] for n in names]


def small_model(seed=0):
    """Width-8, 16-pixel float64 model with every parameter moved off its
    initial value so no gradient is structurally zero."""
    from .model import build_model

    model = build_model(8, input_size=16, reduction_ratio=4, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith("gamma"):
            t.data = rng.uniform(0.8, 1.2, t.shape)
        elif name.endswith(("beta", "bias")):
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    for name, b in model.buffers.items():
        var = name.endswith("var")
        b[:] = rng.uniform(0.8, 1.2, b.shape) if var else rng.uniform(-0.1, 0.1, b.shape)
    return model


def model_check(seed=0, samples=20) -> float:
    """Worst error over every parameter tensor and the input, eval mode."""
    from .model import forward

    model = small_model(seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)))
    worst = 0.0
    for name in list(model.params):
        def fn(w, name=name):
            model.params[name] = w
            return forward(model, x, "eval")
        worst = max(worst, grad_check(fn, model.params[name], samples=samples, seed=1))
    worst = max(worst, grad_check(lambda x: forward(model, x, "eval"), x, samples=samples, seed=1))
    return worst


def layer_cases(seed=0):
    rng = np.random.default_rng(seed)
    cases = []

    x, k, b = _t(rng, 2, 3, 9, 9), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    cases.append(("conv2d", lambda x, k, b: ops.conv2d(x, k, b, stride=2, padding=1), [x, k, b]))
    x, k = _t(rng, 2, 3, 12, 12), _t(rng, 2, 3, 3, 3)
    cases.append(("conv2d dilation 4",
                  lambda x, k: ops.conv2d(x, k, padding=4, dilation=4), [x, k]))
    for shape in ((2, 3, 5, 5), (6, 4)):
        for training in (True, False):
            mode = "train" if training else "eval"
            cases.append((f"batch_norm {len(shape)}d {mode}", *_bn_case(rng, shape, training)))
    x = _t(rng, 2, 3, 8, 8)
    cases.append(("max_pool2d", lambda x: ops.max_pool2d(x, 3, 2, 1), [x]))
    x = _t(rng, 2, 3, 5, 5)
    cases.append(("global_avg_pool", ops.global_avg_pool, [x]))
    x, w, b = _t(rng, 4, 6), _t(rng, 6, 5), _t(rng, 5)
    cases.append(("dense", ops.dense, [x, w, b]))
    x = _t(rng, 4, 5, offset=0.2)
    cases.append(("relu", ops.relu, [x]))
    x = _t(rng, 4, 5, scale=3.0)
    cases.append(("sigmoid", ops.sigmoid, [x]))
    z = _t(rng, 5, 2, scale=2.0)
    targets = np.eye(2)[rng.integers(0, 2, 5)]
    cases.append(("softmax_cross_entropy",
                  lambda z: ops.softmax_cross_entropy(z, targets), [z]))
    for gate in (channel_gate, spatial_gate, bam_refine):
        for training in (True, False):
            mode = "train" if training else "eval"
            cases.append((f"{gate.__name__} {mode}", *_bam_case(rng, gate, training)))
    return cases


def run_suite(include_model=True, seed=0, progress=None) -> list:
    results = []
    for name, fn, inputs in layer_cases(seed):
        t0 = time.perf_counter()
        err = grad_check(fn, inputs, samples=30, seed=seed)
        results.append(CheckResult(name, err, LAYER_TOL, time.perf_counter() - t0))
        if progress:
            progress(results[-1])
    if include_model:
        t0 = time.perf_counter()
        results.append(CheckResult("full model (eval)", model_check(seed), MODEL_TOL,
                                   time.perf_counter() - t0))
        if progress:
            progress(results[-1])
    return results
