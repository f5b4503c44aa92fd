"""Deeply-supervised architectures: DenseNet-DS, ResNet-DS (side-tap / on-path), MLP-DS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .layers import (
    BACKBONE,
    MAIN_HEAD,
    BatchNorm2d,
    Census,
    ClassifierHead,
    Conv2d,
    Layer,
    Linear,
    Parameter,
    ResidualScale,
    aux_head,
    make_aux_head,
    parameter_census,
)
from .tensor import Tensor

DENSENET_CHANNELS = (24, 72, 84, 96)
RESNET_WIDTHS = (16, 32, 64)
SIDE_TAP, ON_PATH = "side_tap", "on_path"


class Outputs(NamedTuple):
    main: Tensor
    aux: list[Tensor]


@dataclass(frozen=True)
class Edge:
    kind: str  # "concat" | "add" | "side_tap"
    sources: tuple[str, ...]
    target: str


class ModelGraph:
    """Ordered layers plus explicit forward topology and one main + K aux outputs."""

    arch_kind = "abstract"

    def __init__(self):
        self.layers: dict[str, Layer] = {}
        self.edges: list[Edge] = []
        self.training = True
        # LSUV hook: called as hook(layer, x) -> output for Conv/Linear layers
        self.layer_hook: Callable[[Layer, Tensor], Tensor] | None = None
        self._capture: dict[str, Tensor] | None = None

    def _add(self, layer: Layer) -> Layer:
        if layer.name in self.layers:
            raise ValueError(f"duplicate layer {layer.name!r}")
        self.layers[layer.name] = layer
        return layer

    def _edge(self, kind: str, sources, target: str) -> None:
        self.edges.append(Edge(kind, tuple(sources), target))

    # ---------------------------------------------------------- parameters

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def backbone_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.role.kind == "backbone"]

    def aux_parameters(self, index: int | None = None) -> list[Parameter]:
        return [p for p in self.parameters() if p.role.is_aux and (index is None or p.role.index == index)]

    def main_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.role.kind == "main"]

    @property
    def num_aux(self) -> int:
        return len({p.role.index for p in self.aux_parameters()})

    def aux_head_weights(self, index: int) -> list[Parameter]:
        """Weights of the aux classifier head ``index`` (excludes on-path projections)."""
        head = self.layers[f"aux{index}"]
        return [p for p in head.parameters() if p.kind == "weight"]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def census(self) -> Census:
        return parameter_census(self.layers.values())

    def batchnorms(self) -> list[BatchNorm2d]:
        return [layer for layer in self.layers.values() if isinstance(layer, BatchNorm2d)]

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for bn in self.batchnorms():
            out[f"{bn.name}.running_mean"] = bn.running_mean.copy()
            out[f"{bn.name}.running_var"] = bn.running_var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data[...] = state[name]
        for bn in self.batchnorms():
            bn.running_mean[...] = state[f"{bn.name}.running_mean"]
            bn.running_var[...] = state[f"{bn.name}.running_var"]

    # ------------------------------------------------------------- forward

    def train(self, mode: bool = True) -> "ModelGraph":
        self.training = mode
        return self

    def eval(self) -> "ModelGraph":
        return self.train(False)

    def __call__(self, x, capture: dict[str, Tensor] | None = None) -> Outputs:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._capture = capture
        try:
            return self._forward(x)
        finally:
            self._capture = None

    def _forward(self, x: Tensor) -> Outputs:
        raise NotImplementedError

    def _record(self, name: str, t: Tensor) -> Tensor:
        if self._capture is not None:
            self._capture[name] = t
        return t

    def _apply(self, layer: Layer, x: Tensor, training: bool | None = None) -> Tensor:
        if isinstance(layer, ClassifierHead):
            h = T.global_avg_pool(x) if layer.pool else x
            out = self._apply(layer.fc, h)
        elif isinstance(layer, BatchNorm2d):
            out = layer(x, self.training)
        elif self.layer_hook is not None and layer.kind in ("Conv", "Linear"):
            out = self.layer_hook(layer, x)
        else:
            out = layer(x)
        return self._record(layer.name, out)

    def calibration_layers(self) -> list[Layer]:
        """Conv/Linear layers in forward execution order."""
        return [layer for layer in self._execution_order() if layer.kind in ("Conv", "Linear")]

    def _execution_order(self) -> list[Layer]:
        order: list[Layer] = []
        seen = set()
        hook = self.layer_hook

        def trace(layer, x):
            if layer.name not in seen:
                seen.add(layer.name)
                order.append(layer)
            return layer(x)

        self.layer_hook = trace
        prev = self.training
        stats = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self.batchnorms()]
        try:
            with T.no_grad():
                self(self.example_input(2))
        finally:
            self.layer_hook = hook
            self.training = prev
            for bn, (m, v) in zip(self.batchnorms(), stats):
                bn.running_mean[...] = m
                bn.running_var[...] = v
        return order

    def example_input(self, n: int) -> np.ndarray:
        raise NotImplementedError

    # ---------------------------------------------------------- invariants

    def validate(self) -> None:
        """Check role partition and side-tap topology; raises ValueError."""
        params = self.parameters()
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names are not unique")
        roles = {p.role.kind for p in params}
        if "main" not in roles:
            raise ValueError("model has no main head")
        indices = sorted({p.role.index for p in params if p.role.is_aux})
        if not indices or indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"aux head indices must be contiguous from 1, got {indices}")
        heads = {name for name, layer in self.layers.items() if isinstance(layer, ClassifierHead)}
        for e in self.edges:
            if e.kind == "side_tap":
                if e.target not in heads:
                    raise ValueError(f"side tap {e} must end in a classifier head")
            elif any(s in heads for s in e.sources):
                raise ValueError(f"head output feeds the backbone through {e}")


# ---------------------------------------------------------------- DenseNet


def _densenet_growth(growth, block_layers: int) -> tuple[int, int, int]:
    if growth is None:
        c0, c1, c2, c3 = DENSENET_CHANNELS
        plan = ((c1 - c0), (c2 - c1 // 2), (c3 - c2 // 2))
        if any(d % block_layers for d in plan):
            raise ValueError(f"channel plan {DENSENET_CHANNELS} is not divisible into {block_layers} layers")
        return tuple(d // block_layers for d in plan)
    if isinstance(growth, int):
        return (growth,) * 3
    return tuple(growth)


class DenseNetDS(ModelGraph):
    """Stem conv, three dense blocks joined by 1x1 stride-2 transitions, aux side-taps after blocks 1 and 2.

    Dense layers are Conv3x3 -> BN -> ReLU; each block's output is the channel
    concatenation of its input and all layer outputs. Transitions halve the
    channel count.
    """

    arch_kind = "DenseNetDS"

    def __init__(self, classes: int = 10, growth=None, block_layers: int = 6,
                 stem_channels: int = DENSENET_CHANNELS[0], batchnorm: bool = True):
        super().__init__()
        if classes not in (10, 100):
            raise ValueError(f"classes must be 10 or 100, got {classes}")
        self.classes = classes
        self.block_layers = block_layers
        self.batchnorm = batchnorm
        self.growth = _densenet_growth(growth, block_layers)

        self._add(Conv2d("stem.conv", 3, stem_channels, 3, BACKBONE, "stem"))
        if batchnorm:
            self._add(BatchNorm2d("stem.bn", stem_channels, BACKBONE, "stem"))
        c = stem_channels
        self.block_channels = []
        for b, g in enumerate(self.growth, start=1):
            group = f"block{b}"
            for i in range(1, block_layers + 1):
                name = f"{group}.layer{i}"
                self._add(Conv2d(f"{name}.conv", c, g, 3, BACKBONE, group))
                if batchnorm:
                    self._add(BatchNorm2d(f"{name}.bn", g, BACKBONE, group))
                self._edge("concat", (f"{group}.concat{i - 1}" if i > 1 else f"{group}.in", f"{name}.conv"),
                           f"{group}.concat{i}")
                c += g
            self.block_channels.append(c)
            if b < 3:
                self._add(make_aux_head(c, classes, aux_head(b)))
                self._edge("side_tap", (group,), f"aux{b}")
                self._add(Conv2d(f"transition{b}.conv", c, c // 2, 1, BACKBONE, f"transition{b}",
                                 stride=2, bias=True))
                c //= 2
        self._add(make_aux_head(c, classes, MAIN_HEAD))
        self.validate()

    def example_input(self, n):
        return np.zeros((n, 3, 8, 8))

    def _conv_bn_relu(self, prefix: str, x: Tensor) -> Tensor:
        y = self._apply(self.layers[f"{prefix}.conv"], x)
        if self.batchnorm:
            y = self._apply(self.layers[f"{prefix}.bn"], y)
        return self._record(prefix, T.relu(y))

    def _forward(self, x):
        h = self._conv_bn_relu("stem", x)
        aux = []
        for b in range(1, 4):
            for i in range(1, self.block_layers + 1):
                y = self._conv_bn_relu(f"block{b}.layer{i}", h)
                h = self._record(f"block{b}.concat{i}", T.concat([h, y], axis=1))
            self._record(f"block{b}", h)
            if b < 3:
                aux.append(self._apply(self.layers[f"aux{b}"], h))
                h = self._apply(self.layers[f"transition{b}.conv"], h)
        return Outputs(self._apply(self.layers["main"], h), aux)


def build_densenet_ds(classes: int = 10, growth=None, block_layers: int = 6, batchnorm: bool = True) -> DenseNetDS:
    return DenseNetDS(classes, growth=growth, block_layers=block_layers, batchnorm=batchnorm)


# ------------------------------------------------------------------ ResNet


class ResNetDS(ModelGraph):
    """Pre-activation ResNet, three stages of two basic blocks, aux heads after stages 1 and 2.

    ``side_tap`` heads only read the stage output. ``on_path`` additionally
    adds ``g_aux(h)``, a 1x1 stride-2 conv of the tapped stage output tagged
    with the aux role, into the residual sum of the next stage's first block.
    """

    arch_kind = "ResNetDS"

    def __init__(self, classes: int = 10, variant: str = SIDE_TAP, batchnorm: bool = True,
                 gates: bool = False, widths=RESNET_WIDTHS, blocks_per_stage: int = 2):
        super().__init__()
        if classes not in (10, 100):
            raise ValueError(f"classes must be 10 or 100, got {classes}")
        if variant not in (SIDE_TAP, ON_PATH):
            raise ValueError(f"variant must be {SIDE_TAP!r} or {ON_PATH!r}, got {variant!r}")
        self.classes = classes
        self.variant = variant
        self.arch_kind = "ResNetDS_SideTap" if variant == SIDE_TAP else "ResNetDS_OnPath"
        self.batchnorm = batchnorm
        self.gates = gates
        self.widths = tuple(widths)
        self.blocks_per_stage = blocks_per_stage

        self._add(Conv2d("stem.conv", 3, widths[0], 3, BACKBONE, "stem"))
        cin = widths[0]
        for s, width in enumerate(widths, start=1):
            for k in range(1, blocks_per_stage + 1):
                stride = 2 if (s > 1 and k == 1) else 1
                self._add_block(f"stage{s}.block{k}", cin, width, stride)
                cin = width
            if s < len(widths):
                self._add(make_aux_head(width, classes, aux_head(s)))
                self._edge("side_tap", (f"stage{s}",), f"aux{s}")
                if variant == ON_PATH:
                    g = self._add(Conv2d(f"aux{s}.g", width, widths[s], 1, aux_head(s), f"aux{s}", stride=2))
                    self._edge("add", (f"stage{s + 1}.block1.shortcut", f"stage{s + 1}.block1.branch", g.name),
                               f"stage{s + 1}.block1")
        if batchnorm:
            self._add(BatchNorm2d("final.bn", cin, BACKBONE, "final"))
        self._add(make_aux_head(cin, classes, MAIN_HEAD))
        self.validate()

    @property
    def num_branches(self) -> int:
        return len(self.widths) * self.blocks_per_stage

    def _add_block(self, name: str, cin: int, cout: int, stride: int) -> None:
        group = name.split(".")[0]
        if self.batchnorm:
            self._add(BatchNorm2d(f"{name}.bn1", cin, BACKBONE, group))
        self._add(Conv2d(f"{name}.conv1", cin, cout, 3, BACKBONE, group, stride=stride, branch=name))
        if self.batchnorm:
            self._add(BatchNorm2d(f"{name}.bn2", cout, BACKBONE, group))
        self._add(Conv2d(f"{name}.conv2", cout, cout, 3, BACKBONE, group, branch=name, final_in_branch=True))
        if self.gates:
            self._add(ResidualScale(f"{name}.scale", BACKBONE, group, branch=name))
        if stride != 1 or cin != cout:
            self._add(Conv2d(f"{name}.shortcut", cin, cout, 1, BACKBONE, group, stride=stride))
        else:
            self._edge("add", (f"{name}.in", f"{name}.branch"), name)

    def example_input(self, n):
        return np.zeros((n, 3, 8, 8))

    def block(self, name: str, h: Tensor, extra: Tensor | None = None) -> Tensor:
        """One residual block: ``shortcut(h) + gate * F(h) [+ extra]``."""
        a = h
        if self.batchnorm:
            a = self._apply(self.layers[f"{name}.bn1"], a)
        a = T.relu(a)
        r = self._apply(self.layers[f"{name}.conv1"], a)
        if self.batchnorm:
            r = self._apply(self.layers[f"{name}.bn2"], r)
        r = self._apply(self.layers[f"{name}.conv2"], T.relu(r))
        if self.gates:
            r = self._apply(self.layers[f"{name}.scale"], r)
        self._record(f"{name}.branch", r)
        sc = self.layers.get(f"{name}.shortcut")
        s = h if sc is None else self._apply(sc, h)
        out = T.add(s, r)
        if extra is not None:
            out = T.add(out, extra)
        return self._record(name, out)

    def _forward(self, x):
        h = self._apply(self.layers["stem.conv"], x)
        aux, extra = [], None
        for s in range(1, len(self.widths) + 1):
            for k in range(1, self.blocks_per_stage + 1):
                h = self.block(f"stage{s}.block{k}", h, extra if k == 1 else None)
            self._record(f"stage{s}", h)
            extra = None
            if s < len(self.widths):
                aux.append(self._apply(self.layers[f"aux{s}"], h))
                if self.variant == ON_PATH:
                    extra = self._apply(self.layers[f"aux{s}.g"], h)
        if self.batchnorm:
            h = self._apply(self.layers["final.bn"], h)
        h = self._record("final", T.relu(h))
        return Outputs(self._apply(self.layers["main"], h), aux)


def build_resnet_ds(classes: int = 10, variant: str = SIDE_TAP, batchnorm: bool = True, gates: bool = False) -> ResNetDS:
    return ResNetDS(classes, variant=variant, batchnorm=batchnorm, gates=gates)


# --------------------------------------------------------------------- MLP


class MlpDS(ModelGraph):
    """Linear-ReLU trunk with one aux head reading the midpoint hidden layer."""

    arch_kind = "MlpDS"

    def __init__(self, input_dim: int, hidden_dims, classes: int):
        super().__init__()
        hidden_dims = list(hidden_dims)
        if len(hidden_dims) < 2:
            raise ValueError(f"MLP-DS needs at least 2 hidden layers, got {len(hidden_dims)}")
        self.input_dim = input_dim
        self.hidden_dims = hidden_dims
        self.classes = classes
        self.tap = (len(hidden_dims) - 1) // 2
        din = input_dim
        for i, width in enumerate(hidden_dims, start=1):
            self._add(Linear(f"hidden{i}", din, width, BACKBONE, f"hidden{i}"))
            din = width
        self._add(make_aux_head(hidden_dims[self.tap], classes, aux_head(1), pool=False))
        self._edge("side_tap", (f"hidden{self.tap + 1}.out",), "aux1")
        self._add(make_aux_head(din, classes, MAIN_HEAD, pool=False))
        self.validate()

    def example_input(self, n):
        return np.zeros((n, self.input_dim))

    def _forward(self, x):
        h = x
        aux = []
        for i in range(1, len(self.hidden_dims) + 1):
            h = self._record(f"hidden{i}.out", T.relu(self._apply(self.layers[f"hidden{i}"], h)))
            if i - 1 == self.tap:
                aux.append(self._apply(self.layers["aux1"], h))
        return Outputs(self._apply(self.layers["main"], h), aux)


def build_mlp_ds(input_dim: int = 16, hidden_dims=(32, 32), classes: int = 4) -> MlpDS:
    return MlpDS(input_dim, hidden_dims, classes)


ARCHS = ("densenet", "resnet", "mlp")


def build_model(arch: str, classes: int, variant: str = SIDE_TAP, input_dim: int = 16,
                hidden_dims=(32, 32), batchnorm: bool = True, gates: bool = False) -> ModelGraph:
    if arch == "densenet":
        return build_densenet_ds(classes, batchnorm=batchnorm)
    if arch == "resnet":
        return build_resnet_ds(classes, variant=variant, batchnorm=batchnorm, gates=gates)
    if arch == "mlp":
        return build_mlp_ds(input_dim, hidden_dims, classes)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
