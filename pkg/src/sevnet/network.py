"""Whole-network assembly, initialization, and checkpoint I/O.

The stem is a 1x7x7 spatial conv with spatial stride 2 into a 3x1x1
temporal conv, both at width 4G and both followed by BatchNorm and ReLU.
Four stages of (3, 4, 6, 3) residual blocks follow at widths
(8G, 16G, 32G, 64G); the first block of each stage downsamples (halving
H and W, doubling channels), so stage s emits 2^(s+1) * G channels at
H / 2^s. The temporal extent is never strided anywhere. A global average
pool, dropout, and an affine head finish the model.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import Block, BlockSpec
from .layers import BatchNorm3d, Conv3d, Linear, Module, ModuleList
from .tensor import (
    Conv3dSpec,
    Tensor,
    dropout,
    global_avg_pool3d,
    relu,
    reshape,
)

STAGE_BLOCK_COUNTS = (3, 4, 6, 3)
VARIANTS = ("sev", "r2plus1d", "r3d")


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "sev"
    group_width: int = 8
    num_classes: int = 174
    se_enabled: bool = False
    se_reduction: int = 4
    dropout_rate: float = 0.5
    input_frames: int = 16
    input_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.group_width < 1:
            raise ValueError("group_width must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class NetworkLayout:
    """Symbolic layer plan: everything needed to build or count the net."""

    config: NetworkConfig
    stem: tuple[Conv3dSpec, Conv3dSpec]
    stages: tuple[tuple[BlockSpec, ...], ...]
    fc_in: int
    fc_out: int


def stage_widths(group_width: int) -> tuple[int, int, int, int]:
    g = group_width
    return (8 * g, 16 * g, 32 * g, 64 * g)


def network_layout(config: NetworkConfig) -> NetworkLayout:
    g = config.group_width
    stem_width = 4 * g
    stem = (
        Conv3dSpec(3, stem_width, (1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3)),
        Conv3dSpec(stem_width, stem_width, (3, 1, 1), padding=(1, 0, 0)),
    )
    stages = []
    in_channels = stem_width
    for stage_index, (width, count) in enumerate(
        zip(stage_widths(g), STAGE_BLOCK_COUNTS), start=2
    ):
        if config.variant == "sev" and in_channels % g != 0:
            raise ValueError(
                f"stage{stage_index}: entry channels {in_channels} not divisible "
                f"by group width {g}"
            )
        blocks = [
            BlockSpec(
                config.variant,
                in_channels,
                g,
                downsample=True,
                se_enabled=config.se_enabled,
                se_reduction=config.se_reduction,
            )
        ]
        blocks += [
            BlockSpec(
                config.variant,
                width,
                g,
                se_enabled=config.se_enabled,
                se_reduction=config.se_reduction,
            )
            for _ in range(count - 1)
        ]
        stages.append(tuple(blocks))
        in_channels = width
    return NetworkLayout(
        config=config,
        stem=stem,
        stages=tuple(stages),
        fc_in=in_channels,
        fc_out=config.num_classes,
    )


class SEVNet(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        layout = network_layout(config)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.config = config
        self.layout = layout
        self.dtype = dtype
        self.stem_conv1 = Conv3d(layout.stem[0], rng, dtype)
        self.stem_bn1 = BatchNorm3d(layout.stem[0].out_channels, dtype)
        self.stem_conv2 = Conv3d(layout.stem[1], rng, dtype)
        self.stem_bn2 = BatchNorm3d(layout.stem[1].out_channels, dtype)
        self.stages = ModuleList(
            ModuleList(Block(bs, rng, dtype) for bs in stage) for stage in layout.stages
        )
        self.fc = Linear(layout.fc_in, layout.fc_out, rng, dtype)

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
        stage_outputs: list | None = None,
    ) -> Tensor:
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
        if x.shape[3] % 32 or x.shape[4] % 32:
            raise ValueError(
                f"spatial extents {x.shape[3]}x{x.shape[4]} must be divisible by 32"
            )
        h = relu(self.stem_bn1.forward(self.stem_conv1.forward(x), training))
        h = relu(self.stem_bn2.forward(self.stem_conv2.forward(h), training))
        for stage in self.stages:
            for block in stage:
                h = block.forward(h, training)
            if stage_outputs is not None:
                stage_outputs.append(h)
        pooled = reshape(global_avg_pool3d(h), (h.shape[0], h.shape[1]))
        pooled = dropout(pooled, self.config.dropout_rate, training=training, rng=rng)
        return self.fc.forward(pooled)


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> SEVNet:
    """Construct and initialize a model; deterministic for a given seed."""
    return SEVNet(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# config text form (the same key-value schema the CLI consumes)
# ---------------------------------------------------------------------------

def config_to_items(config: NetworkConfig) -> list[tuple[str, str]]:
    h, w = config.input_size
    return [
        ("network.variant", config.variant),
        ("network.group_width", str(config.group_width)),
        ("network.num_classes", str(config.num_classes)),
        ("network.se_enabled", "true" if config.se_enabled else "false"),
        ("network.se_reduction", str(config.se_reduction)),
        ("network.dropout", repr(config.dropout_rate)),
        ("network.frames", str(config.input_frames)),
        ("network.size", f"{h}x{w}"),
    ]


def parse_size(text: str) -> tuple[int, int]:
    if "x" in text:
        h, w = text.split("x", 1)
        return (int(h), int(w))
    v = int(text)
    return (v, v)


def config_from_items(items: dict[str, str]) -> NetworkConfig:
    return NetworkConfig(
        variant=items["network.variant"],
        group_width=int(items["network.group_width"]),
        num_classes=int(items["network.num_classes"]),
        se_enabled=items["network.se_enabled"] == "true",
        se_reduction=int(items["network.se_reduction"]),
        dropout_rate=float(items["network.dropout"]),
        input_frames=int(items["network.frames"]),
        input_size=parse_size(items["network.size"]),
    )


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SEVC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    """Base for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _checkpoint_records(model: SEVNet):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b


def save_checkpoint(model: SEVNet, path) -> None:
    """Versioned binary dump of config, parameters, and running stats.

    Arrays are written in traversal (network) order in the model's own
    precision, little-endian, with a trailing CRC32 of everything before.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_text = "\n".join(f"{k} = {v}" for k, v in config_to_items(model.config))
    cfg_bytes = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    records = list(_checkpoint_records(model))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        arr_le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        buf.write(struct.pack("<B", _DTYPE_CODES[arr_le.dtype]))
        buf.write(struct.pack("<I", arr_le.ndim))
        buf.write(struct.pack(f"<{arr_le.ndim}Q", *arr_le.shape))
        buf.write(arr_le.tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> SEVNet:
    """Rebuild a model from a checkpoint, verifying version and checksum."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"checkpoint too small: {len(raw)} bytes")
    payload, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    actual_crc = zlib.crc32(payload)
    if actual_crc != stored_crc:
        raise CheckpointChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}"
        )
    r = _Reader(payload)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected "
            f"{CHECKPOINT_VERSION})"
        )
    cfg_len = r.u32()
    cfg_text = r.take(cfg_len).decode("utf-8")
    items = {}
    for line in cfg_text.splitlines():
        key, _, value = line.partition(" = ")
        items[key] = value
    config = config_from_items(items)

    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    dtype = np.dtype("<f4")
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        dtype = _CODE_DTYPES[r.u8()]
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        nbytes = int(np.prod(shape)) * dtype.itemsize if rank else dtype.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)

    model = build(config, seed=0, dtype=dtype.newbyteorder("="))
    targets: dict[str, np.ndarray] = {
        name: p.data for name, p in model.named_parameters()
    }
    targets.update(dict(model.named_buffers()))
    if set(targets) != set(arrays):
        missing = sorted(set(targets) - set(arrays))
        extra = sorted(set(arrays) - set(targets))
        raise CheckpointFormatError(
            f"record mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, arr in arrays.items():
        if targets[name].shape != arr.shape:
            raise CheckpointFormatError(
                f"record {name}: shape {arr.shape} != model shape "
                f"{targets[name].shape}"
            )
        targets[name][...] = arr
    return model
