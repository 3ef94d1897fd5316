"""Network topology, weight sets, forward/backward execution and accounting."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import tensor as T

LAYER_KINDS = ("conv", "fc", "relu", "maxpool", "flatten", "head")
WEIGHTED = ("conv", "fc", "head")
PASS_THROUGH = ("relu", "maxpool")
TAGS = ("theta", "theta_L1", "theta_L1_th", "theta_c")
INPUT = "input"
BYTES_PER_PARAM = 4


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer chain.

    A ``head`` with ``kernel > 0`` is a convolutional classifier whose kernel
    covers its whole input map; with ``kernel == 0`` it is fully connected.
    """

    name: str
    kind: str
    input: str = INPUT
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def is_conv_like(self) -> bool:
        return self.kind == "conv" or (self.kind == "head" and self.kernel > 0)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    _shapes: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "_shapes", self._validate())

    def _validate(self) -> dict[str, tuple[int, ...]]:
        if len(self.input_shape) != 3:
            raise SpecError(f"input_shape must be [channels, h, w], got {self.input_shape}")
        shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise SpecError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.name in shapes:
                raise SpecError(f"duplicate layer name {layer.name!r}")
            if layer.input not in shapes:
                raise SpecError(f"layer {layer.name!r}: producer {layer.input!r} is not defined before it")
            if layer.weighted and layer.out_channels < 1:
                raise SpecError(f"layer {layer.name!r} has {layer.out_channels} output channels")
            shapes[layer.name] = _out_shape(layer, shapes[layer.input])
        if not any(l.kind == "head" for l in self.layers) and self.layers:
            raise SpecError("network has no head layer")
        return shapes

    # -- lookup ---------------------------------------------------------------
    def __getitem__(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"unknown layer {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(l.name == name for l in self.layers)

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def heads(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "head"]

    @property
    def weighted_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.weighted]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def shape_of(self, name: str) -> tuple[int, ...]:
        """Output shape (without batch dim) of a layer or of ``"input"``."""
        return self._shapes[name]

    def in_shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[self[name].input]

    def direct_consumers(self, name: str) -> list[str]:
        return [l.name for l in self.layers if l.input == name]

    def weight_shape(self, name: str) -> tuple[int, ...]:
        layer = self[name]
        cin = self.in_shape(name)
        if layer.is_conv_like:
            return (layer.out_channels, cin[0], layer.kernel, layer.kernel)
        if layer.weighted:
            return (layer.out_channels, cin[0])
        raise SpecError(f"layer {name!r} ({layer.kind}) has no weights")

    def replace_layer(self, name: str, **changes) -> "NetworkSpec":
        layers = [dataclasses.replace(l, **changes) if l.name == name else l for l in self.layers]
        return NetworkSpec(layers, self.input_shape)

    # -- text form ------------------------------------------------------------
    def to_text(self) -> str:
        lines = ["input " + " ".join(str(s) for s in self.input_shape)]
        for l in self.layers:
            parts = [l.kind, l.name, f"input={l.input}"]
            if l.weighted:
                parts.append(f"out={l.out_channels}")
            if l.kernel:
                parts.append(f"k={l.kernel}")
            if l.kind == "conv":
                parts += [f"stride={l.stride}", f"pad={l.pad}"]
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        input_shape = None
        layers = []
        keys = {"input": "input", "out": "out_channels", "k": "kernel", "stride": "stride", "pad": "pad"}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "input" and len(tok) == 4 and "=" not in line:
                input_shape = tuple(int(t) for t in tok[1:])
                continue
            if len(tok) < 2:
                raise SpecError(f"line {lineno}: expected '<kind> <name> key=value...'")
            kw = {}
            for item in tok[2:]:
                key, _, value = item.partition("=")
                if key not in keys:
                    raise SpecError(f"line {lineno}: unknown key {key!r}")
                kw[keys[key]] = value if key == "input" else int(value)
            layers.append(LayerSpec(name=tok[1], kind=tok[0], **kw))
        if input_shape is None:
            raise SpecError("spec text has no 'input C H W' line")
        return cls(tuple(layers), input_shape)


def _out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "conv" or (kind == "head" and layer.kernel > 0):
        if len(shape) != 3:
            raise SpecError(f"layer {layer.name!r} needs a feature map input, got shape {shape}")
        c, h, w = shape
        k = layer.kernel
        if k < 1 or k > h + 2 * layer.pad or k > w + 2 * layer.pad:
            raise SpecError(f"layer {layer.name!r}: kernel {k} does not fit input {shape}")
        oh = T.conv_out_size(h, k, layer.stride, layer.pad)
        ow = T.conv_out_size(w, k, layer.stride, layer.pad)
        if kind == "head" and (oh, ow) != (1, 1):
            raise SpecError(f"conv head {layer.name!r} must reduce its input to 1x1, got {oh}x{ow}")
        return (layer.out_channels, oh, ow) if kind == "conv" else (layer.out_channels,)
    if kind in ("fc", "head"):
        if len(shape) != 1:
            raise SpecError(f"layer {layer.name!r} needs a flat input, got shape {shape}; add a flatten layer")
        return (layer.out_channels,)
    if kind == "relu":
        return shape
    if kind == "maxpool":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise SpecError(f"maxpool {layer.name!r} needs even spatial dims, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    raise SpecError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# weights

@dataclass
class WeightSet:
    """Weights and biases keyed by layer name.

    ``tag`` names which parameter set this is (original, L1-trained,
    thresholded, pruned). Treated as a snapshot: operations return new sets.
    """

    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    tag: str = "theta"
    layer_set: tuple[str, ...] = ()
    threshold: float | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown weight-set tag {self.tag!r}")

    def copy(self) -> "WeightSet":
        return WeightSet({k: v.copy() for k, v in self.weights.items()},
                         {k: v.copy() for k, v in self.biases.items()},
                         self.tag, tuple(self.layer_set), self.threshold)

    def replace(self, **changes) -> "WeightSet":
        return dataclasses.replace(self, **changes)

    def zeros_like(self) -> "WeightSet":
        return WeightSet({k: np.zeros_like(v) for k, v in self.weights.items()},
                         {k: np.zeros_like(v) for k, v in self.biases.items()}, self.tag)

    def check(self, spec: NetworkSpec) -> None:
        for name in spec.weighted_layers:
            if name not in self.weights or name not in self.biases:
                raise SpecError(f"missing weights for layer {name!r}")
            want = spec.weight_shape(name)
            if self.weights[name].shape != want:
                raise SpecError(f"layer {name!r}: weight shape {self.weights[name].shape} != spec {want}")
            if self.biases[name].shape != (want[0],):
                raise SpecError(f"layer {name!r}: bias shape {self.biases[name].shape} != ({want[0]},)")
        extra = set(self.weights) - set(spec.weighted_layers)
        if extra:
            raise SpecError(f"weights for layers not in spec: {sorted(extra)}")

    def equal(self, other: "WeightSet") -> bool:
        """Bitwise equality of all tensors."""
        if self.weights.keys() != other.weights.keys():
            return False
        return all(np.array_equal(self.weights[k], other.weights[k]) and self.weights[k].dtype == other.weights[k].dtype
                   and np.array_equal(self.biases[k], other.biases[k]) for k in self.weights)


def init_weights(spec: NetworkSpec, seed: int) -> WeightSet:
    """Fan-in scaled uniform initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = {}, {}
    for name in spec.weighted_layers:
        shape = spec.weight_shape(name)
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        ws[name] = rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)
        bs[name] = np.zeros(shape[0], dtype=T.DTYPE)
    return WeightSet(ws, bs)


# ---------------------------------------------------------------------------
# execution

@dataclass
class Batch:
    """Inputs [n,c,h,w] and integer labels.

    ``labels`` is either one array shared by every head or a dict keyed by
    head name.
    """

    inputs: np.ndarray
    labels: np.ndarray | dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.inputs)

    def labels_for(self, head: str) -> np.ndarray:
        if isinstance(self.labels, dict):
            return self.labels[head]
        return self.labels

    def subset(self, idx) -> "Batch":
        if isinstance(self.labels, dict):
            labels = {k: v[idx] for k, v in self.labels.items()}
        else:
            labels = self.labels[idx]
        return Batch(self.inputs[idx], labels)


def _run(spec: NetworkSpec, ws: WeightSet, x: np.ndarray, order=None) -> dict[str, np.ndarray]:
    if tuple(x.shape[1:]) != spec.input_shape:
        raise T.ShapeError(f"input shape {x.shape[1:]} != network input {spec.input_shape}")
    acts = {INPUT: x}
    for layer in order or spec.layers:
        a = acts[layer.input]
        if layer.weighted and layer.name not in ws.weights:
            raise SpecError(f"missing weights for layer {layer.name!r}")
        if layer.is_conv_like:
            out = T.conv2d(a, ws.weights[layer.name], ws.biases[layer.name], layer.stride, layer.pad)
            if layer.kind == "head":
                out = out.reshape(len(out), -1)
        elif layer.weighted:
            out = T.fc(a, ws.weights[layer.name], ws.biases[layer.name])
        elif layer.kind == "relu":
            out = T.relu(a)
        elif layer.kind == "maxpool":
            out = T.maxpool2x2(a)
        else:
            out = a.reshape(len(a), -1)
        acts[layer.name] = out
    return acts


def forward(spec: NetworkSpec, ws: WeightSet, x, order=None) -> dict[str, np.ndarray]:
    """Per-head logits for inputs ``x`` (a Batch or an array)."""
    if isinstance(x, Batch):
        x = x.inputs
    acts = _run(spec, ws, x, order)
    return {h: acts[h] for h in spec.heads}


def loss_and_grads(spec: NetworkSpec, ws: WeightSet, batch: Batch):
    """Summed per-head cross-entropy, per-head logits and parameter gradients."""
    acts = _run(spec, ws, batch.inputs)
    loss = 0.0
    grad_act: dict[str, np.ndarray] = {}
    for h in spec.heads:
        l, g = T.softmax_xent(acts[h], batch.labels_for(h))
        loss += l
        grad_act[h] = g
    gw, gb = {}, {}
    for layer in reversed(spec.layers):
        g = grad_act.pop(layer.name, None)
        if g is None:
            continue
        a = acts[layer.input]
        if layer.is_conv_like:
            w, b = ws.weights[layer.name], ws.biases[layer.name]
            if layer.kind == "head":
                g = g.reshape(len(g), -1, 1, 1)
            gx, gw[layer.name], gb[layer.name] = T.conv2d_grad(a, w, b, g, layer.stride, layer.pad)
        elif layer.weighted:
            gx, gw[layer.name], gb[layer.name] = T.fc_grad(a, ws.weights[layer.name], ws.biases[layer.name], g)
        elif layer.kind == "relu":
            gx = T.relu_grad(a, g)
        elif layer.kind == "maxpool":
            gx = T.maxpool2x2_grad(a, g)
        else:
            gx = g.reshape(a.shape)
        if layer.input == INPUT:
            continue
        if layer.input in grad_act:
            grad_act[layer.input] = grad_act[layer.input] + gx
        else:
            grad_act[layer.input] = gx
    for name in spec.weighted_layers:
        # layers that feed no head get zero gradient
        if name not in gw:
            gw[name] = np.zeros_like(ws.weights[name])
            gb[name] = np.zeros_like(ws.biases[name])
    logits = {h: acts[h] for h in spec.heads}
    return loss, logits, WeightSet(gw, gb, ws.tag)


def total_loss(spec: NetworkSpec, ws: WeightSet, batch: Batch) -> float:
    logits = forward(spec, ws, batch)
    return sum(T.softmax_xent(logits[h], batch.labels_for(h))[0] for h in spec.heads)


def accuracy(spec: NetworkSpec, ws: WeightSet, batch: Batch, chunk: int = 512) -> float:
    """Top-1 accuracy in percent, averaged over heads."""
    correct = {h: 0 for h in spec.heads}
    for start in range(0, len(batch), chunk):
        part = batch.subset(slice(start, start + chunk))
        logits = forward(spec, ws, part)
        for h in spec.heads:
            correct[h] += int((logits[h].argmax(axis=1) == part.labels_for(h)).sum())
    n = max(len(batch), 1)
    return float(np.mean([100.0 * c / n for c in correct.values()]))


# ---------------------------------------------------------------------------
# consumer edges

@dataclass(frozen=True)
class SliceRule:
    """Maps output channel ``i`` of a producer to columns of a consumer's weights.

    ``block == 1`` reads input channel ``i`` of a conv-like consumer (or input
    ``i`` of an fc one); ``block == h*w`` reads the contiguous flattened
    columns ``[i*block, (i+1)*block)`` of an fc consumer after a flatten.
    """

    block: int = 1

    def columns(self, i: int) -> np.ndarray:
        return np.arange(i * self.block, (i + 1) * self.block)

    def columns_for(self, indices: Iterable[int]) -> np.ndarray:
        idx = [self.columns(i) for i in indices]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)


def consumers_of(spec: NetworkSpec, name: str) -> list[tuple[str, SliceRule]]:
    """Every weighted layer whose weights read output channels of ``name``."""
    if name not in spec:
        raise KeyError(f"unknown layer {name!r}")
    if not spec[name].weighted:
        raise SpecError(f"layer {name!r} ({spec[name].kind}) has no output channels to slice")
    found = []

    def walk(node: str, block: int):
        for c in spec.direct_consumers(node):
            layer = spec[c]
            if layer.weighted:
                found.append((c, SliceRule(block)))
            elif layer.kind in PASS_THROUGH:
                walk(c, block)
            elif layer.kind == "flatten":
                shape = spec.shape_of(node)
                hw = int(np.prod(shape[1:])) if len(shape) == 3 else 1
                walk(c, block * hw)

    walk(name, 1)
    return found


def conv_successor(spec: NetworkSpec, name: str) -> str | None:
    """The non-head conv layer that reads ``name``'s output, if exactly one exists."""
    convs = [c for c, _ in consumers_of(spec, name) if spec[c].kind == "conv"]
    return convs[0] if len(convs) == 1 else None


# ---------------------------------------------------------------------------
# accounting

class Count(NamedTuple):
    per_layer: dict[str, int]
    total: int


def count_params(spec: NetworkSpec, include_bias: bool = True) -> Count:
    per = {}
    for name in spec.weighted_layers:
        shape = spec.weight_shape(name)
        per[name] = int(np.prod(shape)) + (shape[0] if include_bias else 0)
    return Count(per, sum(per.values()))


def count_flops(spec: NetworkSpec) -> Count:
    """Multiply-adds per forward pass of one example."""
    per = {}
    for name in spec.weighted_layers:
        layer = spec[name]
        macs = int(np.prod(spec.weight_shape(name)))
        if layer.kind == "conv":
            _, oh, ow = spec.shape_of(name)
            macs *= oh * ow
        per[name] = macs
    return Count(per, sum(per.values()))


def model_size_bytes(spec: NetworkSpec) -> int:
    return BYTES_PER_PARAM * count_params(spec, include_bias=True).total


def model_size_mb(spec: NetworkSpec) -> float:
    return model_size_bytes(spec) / 1e6


def count_nonzero(ws: WeightSet, layers: Iterable[str] | None = None) -> dict[str, int]:
    names = ws.weights if layers is None else layers
    return {n: int(np.count_nonzero(ws.weights[n])) for n in names}


# ---------------------------------------------------------------------------
# reference architectures

VGG16_CONV = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_BLOCKS = (2, 2, 3, 3, 3)


def vgg16_spec(conv_channels=VGG16_CONV, fc=(4096, 4096, 10), input_shape=(3, 224, 224)) -> NetworkSpec:
    """VGG16 with 3x3 convs, five 2x2 pools and three fc layers (last one a head)."""
    if len(conv_channels) != 13 or len(fc) != 3:
        raise SpecError("VGG16 needs 13 conv widths and 3 fc widths")
    layers = []
    prev = INPUT
    it = iter(conv_channels)
    for b, n in enumerate(VGG16_BLOCKS, 1):
        for j in range(1, n + 1):
            name = f"conv{b}_{j}"
            layers += [LayerSpec(name, "conv", prev, next(it), 3, 1, 1), LayerSpec(f"relu{b}_{j}", "relu", name)]
            prev = f"relu{b}_{j}"
        layers.append(LayerSpec(f"pool{b}", "maxpool", prev))
        prev = f"pool{b}"
    layers.append(LayerSpec("flatten", "flatten", prev))
    layers += [LayerSpec("fc6", "fc", "flatten", fc[0]), LayerSpec("relu6", "relu", "fc6"),
               LayerSpec("fc7", "fc", "relu6", fc[1]), LayerSpec("relu7", "relu", "fc7"),
               LayerSpec("fc8", "head", "relu7", fc[2])]
    return NetworkSpec(tuple(layers), input_shape)


DESK_CONV = (16, 16, 32, 32, 32, 32, 32, 32)
DESK_FC = (128, 64)


def desk_spec(conv_channels=DESK_CONV, fc=DESK_FC, n_classes: int = 10, input_shape=(3, 16, 16)) -> NetworkSpec:
    """8-conv / 2-fc classifier with a second head branching off conv block 3.

    The side head reads the block-3 feature map directly, so the last conv of
    block 3 feeds both the next conv and a classifier, the same fan-out an
    SSD detection layer creates.
    """
    c = conv_channels
    L = LayerSpec
    spatial = input_shape[1] // 8
    layers = [
        L("conv1_1", "conv", INPUT, c[0], 3, 1, 1), L("relu1_1", "relu", "conv1_1"),
        L("conv1_2", "conv", "relu1_1", c[1], 3, 1, 1), L("relu1_2", "relu", "conv1_2"),
        L("pool1", "maxpool", "relu1_2"),
        L("conv2_1", "conv", "pool1", c[2], 3, 1, 1), L("relu2_1", "relu", "conv2_1"),
        L("conv2_2", "conv", "relu2_1", c[3], 3, 1, 1), L("relu2_2", "relu", "conv2_2"),
        L("pool2", "maxpool", "relu2_2"),
        L("conv3_1", "conv", "pool2", c[4], 3, 1, 1), L("relu3_1", "relu", "conv3_1"),
        L("conv3_2", "conv", "relu3_1", c[5], 3, 1, 1), L("relu3_2", "relu", "conv3_2"),
        L("pool3", "maxpool", "relu3_2"),
        L("head_a", "head", "pool3", n_classes, spatial),
        L("conv4_1", "conv", "pool3", c[6], 3, 1, 1), L("relu4_1", "relu", "conv4_1"),
        L("conv4_2", "conv", "relu4_1", c[7], 3, 1, 1), L("relu4_2", "relu", "conv4_2"),
        L("flatten", "flatten", "relu4_2"),
        L("fc1", "fc", "flatten", fc[0]), L("relu_fc1", "relu", "fc1"),
        L("fc2", "fc", "relu_fc1", fc[1]), L("relu_fc2", "relu", "fc2"),
        L("head_b", "head", "relu_fc2", n_classes),
    ]
    return NetworkSpec(tuple(layers), input_shape)
