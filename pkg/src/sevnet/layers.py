"""Parameterized layers over the tensor primitives.

A minimal module system: assigning a `Tensor` attribute registers a
parameter, assigning a `Module` registers a child; buffers (batch-norm
running statistics) are registered explicitly. Iteration order follows
registration order so parameter traversal is deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Conv3dSpec,
    Tensor,
    batch_norm3d,
    conv3d,
    linear,
    relu,
    sigmoid,
    global_avg_pool3d,
    reshape,
    mul,
)


class Module:
    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()) -> None:
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def conv_weight_init(
    spec: Conv3dSpec, rng: np.random.Generator, dtype=np.float32
) -> np.ndarray:
    """Zero-mean Gaussian scaled by per-group fan-out."""
    fan_out = (spec.out_channels // spec.groups) * spec.kernel_volume
    std = math.sqrt(2.0 / fan_out)
    return rng.normal(0.0, std, spec.weight_shape).astype(dtype)


class Conv3d(Module):
    def __init__(self, spec: Conv3dSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.weight = Tensor(conv_weight_init(spec, rng, dtype), requires_grad=True)
        if spec.has_bias:
            self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype),
                               requires_grad=True)
        else:
            self.bias = None

    def __setattr__(self, name, value):
        # allow bias=None without registering it
        if name == "bias" and value is None:
            object.__setattr__(self, name, value)
            return
        super().__setattr__(name, value)

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(
            x,
            self.weight,
            self.bias,
            stride=self.spec.stride,
            padding=self.spec.padding,
            groups=self.spec.groups,
        )


class BatchNorm3d(Module):
    """Per-channel scale/shift with running statistics.

    The learned scale starts at 1 and the shift at 0; running stats start
    at mean 0, variance 1 and move by exponential average in training.
    """

    def __init__(self, channels: int, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm3d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32, std: float = 0.01):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            rng.normal(0.0, std, (out_features, in_features)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class SEUnit(Module):
    """Channel gate: global pool, two-layer bottleneck, sigmoid rescale."""

    def __init__(self, channels: int, reduction: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(
                f"SE reduction {reduction} does not divide {channels} channels"
            )
        hidden = channels // reduction
        self.channels = channels
        self.reduction = reduction
        self.fc1 = Linear(channels, hidden, rng, dtype,
                          std=math.sqrt(2.0 / channels))
        self.fc2 = Linear(hidden, channels, rng, dtype,
                          std=math.sqrt(1.0 / hidden))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        s = reshape(global_avg_pool3d(x), (n, c))
        s = sigmoid(self.fc2.forward(relu(self.fc1.forward(s))))
        return mul(x, reshape(s, (n, c, 1, 1, 1)))
