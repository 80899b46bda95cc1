"""Classifier graph: compact Inception-style backbone, BAM sites, custom head.

A :class:`ModelSpec` is a topologically ordered list of :class:`Node` records
plus a flat parameter dictionary keyed ``"<node id>.<param>"``. ``forward``
interprets the node list; every op it calls is differentiable, so a loss on
the logits backpropagates to every parameter.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tnsr
from .attention import BamParams, bam_refine, kaiming_uniform
from .autodiff import Tensor, ops

NUM_CLASSES = 2

DEFAULT_HEAD = (
    {"kind": "dense", "units": 512},
    {"kind": "batch_norm"},
    {"kind": "relu"},
    {"kind": "dropout", "p": 0.3},
    {"kind": "dense", "units": 128},
    {"kind": "batch_norm"},
    {"kind": "relu"},
    {"kind": "dropout", "p": 0.3},
    {"kind": "dense", "units": 32, "activation": "relu"},
    {"kind": "dense", "units": NUM_CLASSES},
)
HEAD_LENGTH = 10


@dataclass
class Node:
    id: str
    kind: str
    inputs: list
    attrs: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    nodes: list
    input_shape: tuple
    bottleneck_sites: list
    head_site: str
    num_classes: int = NUM_CLASSES
    sites_occupied: bool = False
    head_attached: bool = False
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def output(self) -> str:
        return self.nodes[-1].id

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def node(self, node_id) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def copy(self) -> "ModelSpec":
        out = copy.deepcopy(self)
        for name, t in out.params.items():
            out.params[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
        return out

    def astype(self, dtype) -> "ModelSpec":
        out = self.copy()
        for name, t in out.params.items():
            out.params[name] = Tensor(t.data.astype(dtype), requires_grad=True, name=name)
        for name, b in out.buffers.items():
            out.buffers[name] = b.astype(dtype)
        return out

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def validate(self):
        seen = set()
        for n in self.nodes:
            if n.id in seen:
                raise ValueError(f"duplicate node id {n.id!r}")
            for i in n.inputs:
                if i not in seen:
                    raise ValueError(f"node {n.id!r} consumes {i!r} before it is defined")
            seen.add(n.id)
        if len(self.bottleneck_sites) != 3:
            raise ValueError("a model needs exactly three bottleneck sites")
        consumers = {}
        for n in self.nodes:
            for i in n.inputs:
                consumers.setdefault(i, []).append(n)
        for site in self.bottleneck_sites:
            # walk through an inserted attention (or constant gain) node, if any
            nxt = consumers.get(site, [])
            if len(nxt) == 1 and nxt[0].kind in ("bam", "scale"):
                nxt = consumers.get(nxt[0].id, [])
            if len(nxt) != 1 or nxt[0].attrs.get("stride", 1) < 2:
                raise ValueError(f"bottleneck site {site!r} does not precede a downsampling node")
        if self.nodes[0].kind != "input" or sum(n.kind == "input" for n in self.nodes) != 1:
            raise ValueError("model must have exactly one input node, placed first")


# -- construction -----------------------------------------------------------

class _Builder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.nodes = []
        self.params = {}
        self.buffers = {}

    def add(self, node_id, kind, inputs, **attrs):
        self.nodes.append(Node(node_id, kind, list(inputs), attrs))
        return node_id

    def _param(self, name, arr):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

    def conv(self, node_id, src, cin, cout, k, stride=1, padding=0, bias=False):
        shape = (cout, cin, k, k)
        self._param(f"{node_id}.weight", kaiming_uniform(self.rng, shape, cin * k * k, self.dtype))
        if bias:
            self._param(f"{node_id}.bias", np.zeros(cout))
        return self.add(node_id, "conv", [src], in_channels=cin, out_channels=cout, kernel=k,
                        stride=stride, padding=padding, dilation=1, bias=bias)

    def bn(self, node_id, src, channels):
        self._param(f"{node_id}.gamma", np.ones(channels))
        self._param(f"{node_id}.beta", np.zeros(channels))
        self.buffers[f"{node_id}.running_mean"] = np.zeros(channels, dtype=self.dtype)
        self.buffers[f"{node_id}.running_var"] = np.ones(channels, dtype=self.dtype)
        return self.add(node_id, "batch_norm", [src], channels=channels)

    def conv_bn_relu(self, prefix, src, cin, cout, k, stride=1):
        x = self.conv(f"{prefix}.conv", src, cin, cout, k, stride, padding=k // 2)
        x = self.bn(f"{prefix}.bn", x, cout)
        return self.add(f"{prefix}.relu", "relu", [x])

    def dense(self, node_id, src, fin, fout, activation=None, bias=True):
        self._param(f"{node_id}.weight", kaiming_uniform(self.rng, (fin, fout), fin, self.dtype))
        if bias:
            self._param(f"{node_id}.bias", np.zeros(fout))
        return self.add(node_id, "dense", [src], in_features=fin, out_features=fout,
                        activation=activation, bias=bias)


def _inception_block(b: _Builder, prefix, src, cin, cout):
    w = cout // 4
    br1 = b.conv_bn_relu(f"{prefix}.b1x1", src, cin, w, 1)
    x = b.conv_bn_relu(f"{prefix}.b3x3_reduce", src, cin, w, 1)
    br3 = b.conv_bn_relu(f"{prefix}.b3x3", x, w, w, 3)
    x = b.conv_bn_relu(f"{prefix}.b5x5_reduce", src, cin, w, 1)
    x = b.conv_bn_relu(f"{prefix}.b5x5_a", x, w, w, 3)
    br5 = b.conv_bn_relu(f"{prefix}.b5x5_b", x, w, w, 3)
    x = b.add(f"{prefix}.pool", "max_pool", [src], window=3, stride=1, padding=1)
    brp = b.conv_bn_relu(f"{prefix}.pool_proj", x, cin, w, 1)
    return b.add(f"{prefix}.concat", "concat", [br1, br3, br5, brp])


def stage_channels(width: int) -> list:
    """Channel count after the stem and after each of the three downsamplings."""
    return [width, 2 * width, 4 * width, 8 * width]


def build_backbone(width: int = 32, channels_in: int = 3, input_size: int = 224,
                   seed: int = 0, dtype=np.float32) -> ModelSpec:
    """Stem conv (stride 2), then three stages of Inception block + stride-2
    conv. The output of each block is a bottleneck site; the network ends in
    global average pooling, which is the head attachment site."""
    if width < 8 or width % 4:
        raise ValueError(f"width must be >= 8 and divisible by 4, got {width}")
    if channels_in < 1:
        raise ValueError("channels_in must be positive")
    if input_size < 16:
        raise ValueError("input_size must be at least 16")
    b = _Builder(np.random.default_rng(seed), dtype)
    chans = stage_channels(width)
    x = b.add("input", "input", [], shape=[channels_in, input_size, input_size])
    x = b.conv_bn_relu("stem", x, channels_in, width, 3, stride=2)
    sites = []
    for k in range(3):
        x = _inception_block(b, f"stage{k + 1}.block", x, chans[k], chans[k])
        sites.append(x)
        x = b.conv_bn_relu(f"stage{k + 1}.down", x, chans[k], chans[k + 1], 3, stride=2)
    gap = b.add("gap", "global_avg_pool", [x])
    model = ModelSpec(b.nodes, (channels_in, input_size, input_size), sites, gap,
                      params=b.params, buffers=b.buffers)
    model.validate()
    return model


def backbone_param_count(width: int, channels_in: int) -> int:
    """Closed-form trainable-scalar count of ``build_backbone``."""
    chans = stage_channels(width)
    total = 9 * channels_in * width + 2 * width
    for k in range(3):
        c, w = chans[k], chans[k] // 4
        total += 4 * c * w + 3 * 9 * w * w + 7 * 2 * w
        total += 9 * c * chans[k + 1] + 2 * chans[k + 1]
    return total


def site_channels(model: ModelSpec) -> list:
    return [_out_channels(model, s) for s in model.bottleneck_sites]


def _out_channels(model, node_id):
    n = model.node(node_id)
    if n.kind == "concat":
        return sum(_out_channels(model, i) for i in n.inputs)
    if n.kind == "conv":
        return n.attrs["out_channels"]
    if n.kind == "input":
        return n.attrs["shape"][0]
    return _out_channels(model, n.inputs[0])


def insert_attention(model: ModelSpec, reduction_ratio: int = 16, dilation: int = 4,
                     seed: int = 1) -> ModelSpec:
    """Splice an independently parameterized BAM after each bottleneck site."""
    if model.sites_occupied:
        raise ValueError("bottleneck sites already hold attention modules")
    out = model.copy()
    rng = np.random.default_rng(seed)
    for k, site in enumerate(out.bottleneck_sites):
        channels = _out_channels(out, site)
        bam = BamParams.create(channels, reduction_ratio, dilation, rng, out.dtype)
        node_id = f"bam{k + 1}"
        for name, t in bam.weights.items():
            out.params[f"{node_id}.{name}"] = Tensor(t.data, requires_grad=True,
                                                     name=f"{node_id}.{name}")
        for name, arr in bam.buffers.items():
            out.buffers[f"{node_id}.{name}"] = arr
        pos = next(i for i, n in enumerate(out.nodes) if n.id == site)
        for n in out.nodes:
            n.inputs = [node_id if i == site else i for i in n.inputs]
        out.nodes.insert(pos + 1, Node(node_id, "bam", [site], {
            "channels": channels, "reduction_ratio": reduction_ratio, "dilation": dilation}))
    out.sites_occupied = True
    out.validate()
    return out


def validate_head(head, in_features: int, num_classes: int = NUM_CLASSES) -> None:
    """Check a head description; errors name the first offending layer index."""
    head = list(head)
    if len(head) != HEAD_LENGTH:
        raise ValueError(f"head must have exactly {HEAD_LENGTH} layers, got {len(head)}")
    features = in_features
    for i, layer in enumerate(head):
        kind = layer.get("kind")
        if kind == "dense":
            if layer.get("in_features", features) != features:
                raise ValueError(
                    f"head layer {i}: expects {layer['in_features']} inputs, receives {features}")
            units = layer.get("units")
            if not isinstance(units, int) or units < 1:
                raise ValueError(f"head layer {i}: dense units must be a positive int")
            if layer.get("activation") not in (None, "relu"):
                raise ValueError(f"head layer {i}: unsupported activation")
            features = units
        elif kind == "batch_norm":
            if layer.get("features", features) != features:
                raise ValueError(
                    f"head layer {i}: batch norm over {layer['features']} features, "
                    f"receives {features}")
        elif kind == "dropout":
            if not 0 <= layer.get("p", -1) < 1:
                raise ValueError(f"head layer {i}: dropout p must lie in [0, 1)")
        elif kind != "relu":
            raise ValueError(f"head layer {i}: unknown kind {kind!r}")
    last = head[-1]
    if last.get("kind") != "dense" or last.get("activation"):
        raise ValueError(f"head layer {HEAD_LENGTH - 1}: final layer must be a plain dense layer")
    if features != num_classes:
        raise ValueError(
            f"head layer {HEAD_LENGTH - 1}: outputs {features} logits, expected {num_classes}")


def attach_head(model: ModelSpec, head=DEFAULT_HEAD, seed: int = 2) -> ModelSpec:
    if model.head_attached:
        raise ValueError("head site already occupied")
    in_features = _out_channels(model, model.head_site)
    validate_head(head, in_features, model.num_classes)
    out = model.copy()
    b = _Builder(np.random.default_rng(seed), out.dtype)
    b.params, b.buffers = out.params, out.buffers
    x = out.head_site
    features = in_features
    for i, layer in enumerate(head):
        node_id = f"head.{i}"
        kind = layer["kind"]
        if kind == "dense":
            # a bias directly before batch norm is cancelled by it
            feeds_bn = i + 1 < len(head) and head[i + 1]["kind"] == "batch_norm"
            bias = layer.get("bias", not (feeds_bn and not layer.get("activation")))
            x = b.dense(node_id, x, features, layer["units"], layer.get("activation"), bias)
            features = layer["units"]
        elif kind == "batch_norm":
            x = b.bn(node_id, x, features)
        elif kind == "dropout":
            x = b.add(node_id, "dropout", [x], p=float(layer["p"]))
        else:
            x = b.add(node_id, "relu", [x])
    out.nodes.extend(b.nodes)
    out.head_attached = True
    out.validate()
    return out


def build_model(width=32, channels_in=3, input_size=224, reduction_ratio=16, dilation=4,
                head=DEFAULT_HEAD, attention=True, seed=0, dtype=np.float32) -> ModelSpec:
    """Backbone, optional attention at the three sites, and the head."""
    model = build_backbone(width, channels_in, input_size, seed, dtype)
    if attention:
        model = insert_attention(model, reduction_ratio, dilation, seed + 1)
    return attach_head(model, head, seed + 2)


def param_count(model: ModelSpec) -> int:
    return int(sum(t.size for t in model.params.values()))


# -- forward ----------------------------------------------------------------

def _bam_view(model, node):
    prefix = node.id + "."
    a = node.attrs
    p = BamParams(a["channels"], a["reduction_ratio"], a["dilation"])
    p.weights = {k[len(prefix):]: v for k, v in model.params.items() if k.startswith(prefix)}
    p.buffers = {k[len(prefix):]: v for k, v in model.buffers.items() if k.startswith(prefix)}
    return p


def forward(model: ModelSpec, batch, mode: str = "eval", rng=None) -> Tensor:
    """Run the graph. ``mode`` is ``"train"`` (batch statistics, dropout
    drawn from ``rng``: a Generator or int seed) or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(0 if rng is None else rng)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(
            f"batch shape {x.shape} does not match model input N x {tuple(model.input_shape)}")
    p, buf = model.params, model.buffers
    vals = {}
    for node in model.nodes:
        a = node.attrs
        ins = [vals[i] for i in node.inputs]
        k = node.kind
        if k == "input":
            y = x
        elif k == "conv":
            y = ops.conv2d(ins[0], p[f"{node.id}.weight"], p.get(f"{node.id}.bias"),
                           a["stride"], a["padding"], a["dilation"])
        elif k == "batch_norm":
            y = ops.batch_norm(ins[0], p[f"{node.id}.gamma"], p[f"{node.id}.beta"],
                               buf[f"{node.id}.running_mean"], buf[f"{node.id}.running_var"],
                               training)
        elif k == "relu":
            y = ops.relu(ins[0])
        elif k == "max_pool":
            y = ops.max_pool2d(ins[0], a["window"], a["stride"], a["padding"])
        elif k == "concat":
            y = ops.concat(ins, axis=1)
        elif k == "global_avg_pool":
            y = ops.flatten(ops.global_avg_pool(ins[0]))
        elif k == "dense":
            y = ops.dense(ins[0], p[f"{node.id}.weight"], p.get(f"{node.id}.bias"))
            if a.get("activation") == "relu":
                y = ops.relu(y)
        elif k == "dropout":
            y = ops.dropout(ins[0], a["p"], rng, training)
        elif k == "bam":
            y = bam_refine(ins[0], _bam_view(model, node), training)
        elif k == "scale":
            y = ops.scale(ins[0], a["factor"])
        else:
            raise ValueError(f"unknown node kind {k!r}")
        vals[node.id] = y
    return vals[model.output]


# -- persistence ------------------------------------------------------------

def architecture(model: ModelSpec) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "bottleneck_sites": list(model.bottleneck_sites),
        "head_site": model.head_site,
        "sites_occupied": model.sites_occupied,
        "head_attached": model.head_attached,
        "nodes": [{"id": n.id, "kind": n.kind, "inputs": n.inputs, "attrs": n.attrs}
                  for n in model.nodes],
    }


def architecture_hash(model: ModelSpec) -> str:
    blob = json.dumps(architecture(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def model_to_json(model: ModelSpec) -> str:
    doc = architecture(model)
    doc["dtype"] = str(model.dtype)
    doc["arch_hash"] = architecture_hash(model)
    doc["parameters"] = {name: list(t.shape) for name, t in model.params.items()}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_model(model: ModelSpec, directory) -> None:
    """Write ``model.json`` and ``params.tnsr`` (parameters then buffers)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "model.json").write_text(model_to_json(model), encoding="utf-8")
    named = {name: t.data for name, t in model.params.items()}
    named.update({f"buffer:{name}": arr for name, arr in model.buffers.items()})
    tnsr.save_pack(directory / "params.tnsr", named)


def load_model(directory) -> ModelSpec:
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    arrays = tnsr.load_pack(directory / "params.tnsr")
    params, buffers = {}, {}
    for name, arr in arrays.items():
        if name.startswith("buffer:"):
            buffers[name[len("buffer:"):]] = arr.copy()
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    missing = set(doc["parameters"]) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    model = ModelSpec(
        nodes=[Node(n["id"], n["kind"], n["inputs"], n["attrs"]) for n in doc["nodes"]],
        input_shape=tuple(doc["input_shape"]),
        bottleneck_sites=doc["bottleneck_sites"],
        head_site=doc["head_site"],
        num_classes=doc["num_classes"],
        sites_occupied=doc["sites_occupied"],
        head_attached=doc["head_attached"],
        params=params,
        buffers=buffers,
    )
    if architecture_hash(model) != doc["arch_hash"]:
        raise ValueError("model.json architecture hash does not match its node list")
    return model
