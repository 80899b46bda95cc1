"""Bottleneck Attention Module.

The feature map ``F`` is refined as ``F + F * M(F)`` where
``M(F) = sigmoid(channel_gate(F) + spatial_gate(F))``. The channel gate is
global average pooling followed by a two-layer bottleneck MLP and batch
norm over the batch axis. The spatial gate is a 1x1 reduction, two dilated
3x3 convolutions and a 1x1 projection to one channel, again ending in
batch norm. Each gate's final batch norm starts with ``gamma = 0`` so a
fresh module computes exactly ``1.5 * F``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops

_BN_LAYERS = (
    "channel.bn",
    "spatial.reduce_bn",
    "spatial.dil1_bn",
    "spatial.dil2_bn",
    "spatial.bn",
)
_FINAL_BN = ("channel.bn", "spatial.bn")


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def bam_param_count(channels: int, reduction_ratio: int = 16) -> int:
    """Trainable scalars in one module, in closed form."""
    c, h = channels, channels // reduction_ratio
    channel = c * h + h + h * c + 2 * c
    spatial = c * h + 2 * h + 2 * (9 * h * h + 2 * h) + h + 2
    return channel + spatial


@dataclass
class BamParams:
    channels: int
    reduction_ratio: int = 16
    dilation: int = 4
    weights: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.reduction_ratio < 1 or self.dilation < 1:
            raise ValueError("channels, reduction_ratio and dilation must be positive")
        if self.channels % self.reduction_ratio:
            raise ValueError(
                f"channels {self.channels} not divisible by reduction ratio "
                f"{self.reduction_ratio}")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction_ratio

    def shapes(self) -> dict:
        c, h = self.channels, self.hidden
        shapes = {
            "channel.fc1.weight": (c, h),
            "channel.fc1.bias": (h,),
            "channel.fc2.weight": (h, c),
            "spatial.reduce.weight": (h, c, 1, 1),
            "spatial.dil1.weight": (h, h, 3, 3),
            "spatial.dil2.weight": (h, h, 3, 3),
            "spatial.project.weight": (1, h, 1, 1),
        }
        for bn in _BN_LAYERS:
            width = c if bn == "channel.bn" else 1 if bn == "spatial.bn" else h
            shapes[f"{bn}.gamma"] = (width,)
            shapes[f"{bn}.beta"] = (width,)
        return shapes

    @classmethod
    def create(cls, channels, reduction_ratio=16, dilation=4, rng=None, dtype=np.float32):
        """Kaiming-uniform weights, zero biases, identity-start batch norms."""
        params = cls(channels, reduction_ratio, dilation)
        rng = np.random.default_rng(0) if rng is None else rng
        for name, shape in params.shapes().items():
            if name.endswith(".gamma"):
                fill = 0.0 if name[:-6] in _FINAL_BN else 1.0
                arr = np.full(shape, fill, dtype=dtype)
            elif name.endswith((".beta", ".bias")):
                arr = np.zeros(shape, dtype=dtype)
            else:
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
                arr = kaiming_uniform(rng, shape, fan_in, dtype)
            params.weights[name] = Tensor(arr, requires_grad=True, name=name)
        for bn in _BN_LAYERS:
            width = params.shapes()[f"{bn}.gamma"][0]
            params.buffers[f"{bn}.running_mean"] = np.zeros(width, dtype=dtype)
            params.buffers[f"{bn}.running_var"] = np.ones(width, dtype=dtype)
        return params

    def param_count(self) -> int:
        return sum(t.size for t in self.weights.values())

    def _bn(self, x, name, training):
        return ops.batch_norm(
            x, self.weights[f"{name}.gamma"], self.weights[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
            training, self.momentum, self.eps)

    def _check(self, feature):
        if feature.ndim != 4 or feature.shape[1] != self.channels:
            raise ValueError(
                f"feature map {feature.shape} does not match module channels {self.channels}")


def channel_gate(feature, params: BamParams, training=True) -> Tensor:
    """Pre-sigmoid channel attention, shape N x C x 1 x 1."""
    params._check(feature)
    n, c = feature.shape[:2]
    w = params.weights
    z = ops.flatten(ops.global_avg_pool(feature))
    z = ops.relu(ops.dense(z, w["channel.fc1.weight"], w["channel.fc1.bias"]))
    z = ops.dense(z, w["channel.fc2.weight"])
    z = params._bn(z, "channel.bn", training)
    return ops.reshape(z, (n, c, 1, 1))


def spatial_gate(feature, params: BamParams, training=True) -> Tensor:
    """Pre-sigmoid spatial attention, shape N x 1 x H x W."""
    params._check(feature)
    w, d = params.weights, params.dilation
    z = ops.conv2d(feature, w["spatial.reduce.weight"])
    z = ops.relu(params._bn(z, "spatial.reduce_bn", training))
    for k in ("dil1", "dil2"):
        z = ops.conv2d(z, w[f"spatial.{k}.weight"], padding=d, dilation=d)
        z = ops.relu(params._bn(z, f"spatial.{k}_bn", training))
    z = ops.conv2d(z, w["spatial.project.weight"])
    return params._bn(z, "spatial.bn", training)


def attention_map(feature, params: BamParams, training=True) -> Tensor:
    """``sigmoid(channel + spatial)`` broadcast to N x C x H x W."""
    return ops.sigmoid(ops.add(channel_gate(feature, params, training),
                               spatial_gate(feature, params, training)))


def bam_refine(feature, params: BamParams, training=True) -> Tensor:
    m = attention_map(feature, params, training)
    return ops.add(feature, ops.mul(feature, m))
