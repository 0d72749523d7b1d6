"""Grouped spatio-temporal 3D convnets for video action recognition."""

from .tensor import (
    Conv3dSpec,
    ShapeError,
    Tensor,
    backward,
    count_multiplies,
    load_tensor,
    no_grad,
    save_tensor,
)
from .blocks import Block, BlockSpec
from .network import (
    NetworkConfig,
    SEVNet,
    build,
    load_checkpoint,
    network_layout,
    save_checkpoint,
)
from .analysis import ComplexityReport, count_macs, count_params, report

__version__ = "0.1.0"

__all__ = [
    "Conv3dSpec",
    "ShapeError",
    "Tensor",
    "backward",
    "count_multiplies",
    "load_tensor",
    "no_grad",
    "save_tensor",
    "Block",
    "BlockSpec",
    "NetworkConfig",
    "SEVNet",
    "build",
    "load_checkpoint",
    "network_layout",
    "save_checkpoint",
    "ComplexityReport",
    "count_macs",
    "count_params",
    "report",
    "__version__",
]
