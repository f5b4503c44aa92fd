"""Role-tagged parameters and the layer kinds the model zoo is built from."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class RoleTag:
    """Which part of a deeply-supervised network a parameter belongs to."""

    kind: str  # "backbone" | "aux" | "main"
    index: int | None = None

    def __post_init__(self):
        if self.kind not in ("backbone", "aux", "main"):
            raise ValueError(f"unknown role kind {self.kind!r}")
        if (self.kind == "aux") != (self.index is not None):
            raise ValueError("aux roles carry an index, other roles do not")
        if self.kind == "aux" and self.index < 1:
            raise ValueError("aux head indices start at 1")

    @property
    def is_aux(self) -> bool:
        return self.kind == "aux"

    def __str__(self) -> str:
        return f"aux{self.index}" if self.is_aux else self.kind


BACKBONE = RoleTag("backbone")
MAIN_HEAD = RoleTag("main")


def aux_head(index: int) -> RoleTag:
    return RoleTag("aux", index)


class Parameter(Tensor):
    """A trainable tensor with a stable name and a role tag.

    ``kind`` is one of ``weight``, ``bias``, ``bn_scale``, ``bn_shift`` or
    ``gate``; initializers dispatch on it. ``branch`` names the residual
    branch a weight sits in (None outside residual branches).
    """

    def __init__(
        self,
        name: str,
        shape: tuple[int, ...],
        role: RoleTag,
        kind: str,
        fan_in: int | None = None,
        fan_out: int | None = None,
        branch: str | None = None,
        is_final_in_branch: bool = False,
    ):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.name = name
        self.role = role
        self.kind = kind
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.branch = branch
        self.is_final_in_branch = is_final_in_branch

    @property
    def is_residual_scale(self) -> bool:
        return self.kind == "gate"

    @property
    def decays(self) -> bool:
        return self.kind == "weight"

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, role={self.role})"


class Layer:
    kind = "Layer"

    def __init__(self, name: str, role: RoleTag, group: str):
        self.name = name
        self.role = role
        self.group = group

    def parameters(self) -> list[Parameter]:
        return []

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv2d(Layer):
    kind = "Conv"

    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        k: int,
        role: RoleTag,
        group: str,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = False,
        branch: str | None = None,
        final_in_branch: bool = False,
    ):
        super().__init__(name, role, group)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(
            f"{name}.weight", (cout, cin, k, k), role, "weight",
            fan_in=cin * k * k, fan_out=cout * k * k,
            branch=branch, is_final_in_branch=final_in_branch,
        )
        self.bias = Parameter(f"{name}.bias", (cout,), role, "bias", branch=branch) if bias else None

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Layer):
    kind = "Linear"

    def __init__(self, name: str, din: int, dout: int, role: RoleTag, group: str, bias: bool = True):
        super().__init__(name, role, group)
        self.weight = Parameter(f"{name}.weight", (dout, din), role, "weight", fan_in=din, fan_out=dout)
        self.bias = Parameter(f"{name}.bias", (dout,), role, "bias") if bias else None

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Layer):
    kind = "BatchNorm"

    def __init__(self, name: str, channels: int, role: RoleTag, group: str, momentum=0.1, eps=1e-5):
        super().__init__(name, role, group)
        self.scale = Parameter(f"{name}.scale", (channels,), role, "bn_scale")
        self.shift = Parameter(f"{name}.shift", (channels,), role, "bn_shift")
        self.scale.data[:] = 1.0
        self.momentum = momentum
        self.eps = eps
        self.reset_running_stats()

    def reset_running_stats(self) -> None:
        c = self.scale.shape[0]
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def parameters(self):
        return [self.scale, self.shift]

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return T.batchnorm2d(
            x, self.scale, self.shift, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )


class ResidualScale(Layer):
    """A learnable scalar gate on a residual branch output."""

    kind = "ResidualScale"

    def __init__(self, name: str, role: RoleTag, group: str, branch: str | None = None):
        super().__init__(name, role, group)
        self.gate = Parameter(f"{name}.gate", (1,), role, "gate", branch=branch)
        self.gate.data[:] = 1.0

    def parameters(self):
        return [self.gate]

    def __call__(self, x: Tensor) -> Tensor:
        return T.scalar_mul(x, self.gate)


class ClassifierHead(Layer):
    """Optional global average pooling followed by a bias-free linear classifier."""

    kind = "Head"

    def __init__(self, name: str, channels: int, classes: int, role: RoleTag, pool: bool = True):
        super().__init__(name, role, name)
        self.pool = pool
        self.fc = Linear(f"{name}.fc", channels, classes, role, name, bias=False)

    def parameters(self):
        return self.fc.parameters()


def make_aux_head(channels: int, classes: int, role: RoleTag, name: str | None = None, pool: bool = True) -> ClassifierHead:
    if channels < 1:
        raise ValueError(f"head needs at least one input channel, got {channels}")
    if classes < 2:
        raise ValueError(f"head needs at least two classes, got {classes}")
    if name is None:
        name = f"aux{role.index}" if role.is_aux else "main"
    return ClassifierHead(name, channels, classes, role, pool=pool)


@dataclass
class Census:
    by_name: dict[str, int]
    by_layer: dict[str, int]
    by_group: dict[str, int]
    by_role: dict[str, int]
    total: int = field(init=False)

    def __post_init__(self):
        self.total = sum(self.by_name.values())

    @property
    def aux_total(self) -> int:
        return sum(n for role, n in self.by_role.items() if role.startswith("aux"))

    @property
    def aux_fraction(self) -> float:
        return self.aux_total / self.total if self.total else 0.0


def parameter_census(layers: Iterable[Layer]) -> Census:
    by_name, by_layer = {}, defaultdict(int)
    by_group, by_role = defaultdict(int), defaultdict(int)
    for layer in layers:
        for p in layer.parameters():
            if p.name in by_name:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            n = p.size
            by_name[p.name] = n
            by_layer[layer.name] += n
            by_group[layer.group] += n
            by_role[str(p.role)] += n
    return Census(by_name, dict(by_layer), dict(by_group), dict(by_role))
