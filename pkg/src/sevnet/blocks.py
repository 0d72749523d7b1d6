"""Residual building blocks.

Three residual branch layouts share one block schema:

  sev        1x1x1 dense -> 1x3x3 grouped -> 3x1x1 dense, constant width
  r2plus1d   1x1x1 -> 1x3x3 dense -> 3x1x1, middle width C/2
  r3d        1x1x1 -> 3x3x3 dense -> 1x1x1, middle width round(C/2.6)

Every conv is followed by BatchNorm and ReLU; nothing follows the merge.
Standard blocks add the branch to the identity. Downsample blocks put
spatial stride 2 on the branch's spatial conv, pool-and-project the
shortcut, and concatenate, doubling the channel count. The optional SE
gate rescales the branch output just before the merge.

``main_conv_specs``/``shortcut_conv_spec`` are the single source of
truth for block geometry; the complexity counters consume the same
functions the constructors do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm3d, Conv3d, Module, ModuleList, SEUnit
from .tensor import Conv3dSpec, Tensor, add, avg_pool3d, concat, relu

BLOCK_KINDS = ("sev", "r2plus1d", "r3d")

R2PLUS1D_MIDDLE_RATIO = 0.5
R3D_MIDDLE_RATIO = 1.0 / 2.6


@dataclass(frozen=True)
class BlockSpec:
    """One residual block: branch layout, width, and shortcut behaviour."""

    kind: str
    channels: int  # input channel count
    group_width: int
    downsample: bool = False
    se_enabled: bool = False
    se_reduction: int = 4

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.channels < 1 or self.group_width < 1:
            raise ValueError("channels and group_width must be positive")
        if self.kind == "sev" and self.channels % self.group_width != 0:
            raise ValueError(
                f"group width {self.group_width} does not divide "
                f"{self.channels} channels"
            )
        if self.se_enabled and self.channels % self.se_reduction != 0:
            raise ValueError(
                f"gate reduction {self.se_reduction} does not divide "
                f"{self.channels} channels"
            )
        if self.middle_channels < 1:
            raise ValueError(f"middle width collapsed to zero for C={self.channels}")

    @property
    def middle_channels(self) -> int:
        if self.kind == "r2plus1d":
            return round(self.channels * R2PLUS1D_MIDDLE_RATIO)
        if self.kind == "r3d":
            return round(self.channels * R3D_MIDDLE_RATIO)
        return self.channels

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.downsample else self.channels


def _same_pad(kernel: tuple[int, int, int]) -> tuple[int, int, int]:
    return (kernel[0] // 2, kernel[1] // 2, kernel[2] // 2)


def main_conv_specs(spec: BlockSpec) -> list[Conv3dSpec]:
    """Conv stack of the residual branch, in execution order."""
    c, m = spec.channels, spec.middle_channels
    spatial_stride = (1, 2, 2) if spec.downsample else (1, 1, 1)
    if spec.kind == "sev":
        kernels = [(1, 1, 1), (1, 3, 3), (3, 1, 1)]
        widths = [(c, c), (c, c), (c, c)]
        groups = [1, c // spec.group_width, 1]
    elif spec.kind == "r2plus1d":
        kernels = [(1, 1, 1), (1, 3, 3), (3, 1, 1)]
        widths = [(c, m), (m, m), (m, c)]
        groups = [1, 1, 1]
    else:  # r3d
        kernels = [(1, 1, 1), (3, 3, 3), (1, 1, 1)]
        widths = [(c, m), (m, m), (m, c)]
        groups = [1, 1, 1]
    specs = []
    for i, (kernel, (cin, cout), g) in enumerate(zip(kernels, widths, groups)):
        stride = spatial_stride if i == 1 else (1, 1, 1)
        specs.append(
            Conv3dSpec(cin, cout, kernel, stride=stride,
                       padding=_same_pad(kernel), groups=g)
        )
    return specs


def shortcut_conv_spec(spec: BlockSpec) -> Conv3dSpec:
    """Channel projection after the shortcut pool (downsample blocks)."""
    c = spec.channels
    return Conv3dSpec(c, c, (1, 1, 1))


SHORTCUT_POOL_KERNEL = (1, 2, 2)
SHORTCUT_POOL_STRIDE = (1, 2, 2)


class Block(Module):
    """Residual block instantiated from a BlockSpec."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.convs = ModuleList(
            Conv3d(cs, rng, dtype) for cs in main_conv_specs(spec)
        )
        self.bns = ModuleList(
            BatchNorm3d(c.spec.out_channels, dtype) for c in self.convs
        )
        if spec.se_enabled:
            self.se = SEUnit(spec.channels, spec.se_reduction, rng, dtype)
        else:
            self.se = None
        if spec.downsample:
            self.shortcut_conv = Conv3d(shortcut_conv_spec(spec), rng, dtype)
            self.shortcut_bn = BatchNorm3d(spec.channels, dtype)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def __setattr__(self, name, value):
        if value is None and name in ("se", "shortcut_conv", "shortcut_bn"):
            object.__setattr__(self, name, value)
            return
        super().__setattr__(name, value)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ValueError(
                f"block expects {self.spec.channels} channels, got {x.shape[1]}"
            )
        if self.spec.downsample and (x.shape[3] % 2 or x.shape[4] % 2):
            raise ValueError(
                f"downsample block needs even spatial extents, got "
                f"{x.shape[3]}x{x.shape[4]}"
            )
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = relu(bn.forward(conv.forward(h), training))
        if self.se is not None:
            h = self.se.forward(h)
        if not self.spec.downsample:
            return add(x, h)
        s = avg_pool3d(x, SHORTCUT_POOL_KERNEL, SHORTCUT_POOL_STRIDE)
        s = relu(self.shortcut_bn.forward(self.shortcut_conv.forward(s), training))
        return concat([h, s], axis=1)
