"""Parameters, module containers and the handful of layers the model needs."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError
from ..rng import RngContext
from . import functional as F
from .tensor import Tensor, relu, sigmoid

ROLES = ("weight", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "gate", "embedding")


class Parameter(Tensor):
    """A named, model-owned tensor. Running BN statistics are Parameters
    with ``requires_grad=False``."""

    def __init__(self, data, role: str = "weight", requires_grad: bool = True, dtype=None):
        if role not in ROLES:
            raise ConfigError(f"unknown parameter role {role!r}")
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.role = role
        self.name: Optional[str] = None

    @property
    def trainable(self) -> bool:
        return self.requires_grad and self.role not in ("bn_running_mean", "bn_running_var")


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise ConfigError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != arr.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.trainable_parameters():
            p.grad = np.zeros_like(p.data)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng: RngContext, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape, dtype=np.float32)


class Conv2d(Module):
    def __init__(self, rng: RngContext, cin: int, cout: int, k: int, stride: int = 1,
                 groups: int = 1, bias: bool = True, padding: Optional[int] = None):
        if cin <= 0 or cout <= 0 or cin % groups or cout % groups:
            raise ConfigError(f"invalid conv widths {cin}->{cout} with groups={groups}")
        self.stride, self.groups = stride, groups
        self.padding = k // 2 if padding is None else padding
        fan_in = (cin // groups) * k * k
        # He-style gain: most convs feed a ReLU
        self.weight = Parameter(_fan_in_uniform(rng, (cout, cin // groups, k, k), fan_in, math.sqrt(2.0)))
        self.bias = Parameter(np.zeros(cout, np.float32), role="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(c, np.float32), role="bn_gamma")
        self.beta = Parameter(np.zeros(c, np.float32), role="bn_beta")
        self.running_mean = Parameter(np.zeros(c, np.float32), role="bn_running_mean", requires_grad=False)
        self.running_var = Parameter(np.ones(c, np.float32), role="bn_running_var", requires_grad=False)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, rng: RngContext, cin: int, cout: int, bias: bool = True, gain: float = math.sqrt(2.0)):
        self.weight = Parameter(_fan_in_uniform(rng, (cout, cin), cin, gain))
        self.bias = Parameter(np.zeros(cout, np.float32), role="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, rng: RngContext, cin: int, cout: int, k: int, stride: int = 1):
        self.conv = Conv2d(rng, cin, cout, k, stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class DSConvBNReLU(Module):
    """3x3 depthwise conv, 1x1 pointwise conv, then BN and ReLU."""

    def __init__(self, rng: RngContext, cin: int, cout: int, k: int = 3):
        self.dw = Conv2d(rng, cin, cin, k, groups=cin, bias=False)
        self.pw = Conv2d(rng, cin, cout, 1, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.pw(self.dw(x))))


class Gate(Module):
    """Scalar in (0, 1) stored as a raw logit; ``forced`` pins the mapped value."""

    def __init__(self, raw: float = 0.0):
        self.raw = Parameter(np.array([raw], np.float32), role="gate")
        self.forced: Optional[float] = None

    def forward(self) -> Tensor:
        if self.forced is not None:
            return Tensor(np.array([self.forced], dtype=self.raw.dtype))
        return sigmoid(self.raw)
