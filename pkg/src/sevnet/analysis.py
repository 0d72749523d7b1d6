"""Analytic complexity accounting: parameter and multiply-accumulate counts.

Counting is purely symbolic: it walks the network layout and never
materializes a parameter. Conventions:

  * one MAC per multiply in a conv or affine kernel; a conv layer costs
    output_elements * (in_channels / groups) * kernel_volume, an affine
    layer in * out (single sample, single crop);
  * normalization, activations, pooling, dropout and the channel gate's
    rescale contribute zero MACs;
  * parameter totals include conv and affine weights, affine and gate
    biases, and the 2 learned scalars per normalized channel; running
    statistics are not parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .blocks import (
    SHORTCUT_POOL_KERNEL,
    SHORTCUT_POOL_STRIDE,
    BlockSpec,
    main_conv_specs,
    shortcut_conv_spec,
)
from .network import NetworkConfig, NetworkLayout, network_layout
from .tensor import Conv3dSpec, conv_output_extent


@dataclass(frozen=True)
class LayerRecord:
    name: str
    kind: str  # conv | bn | fc | pool | gap
    params: int
    macs: int
    out_shape: tuple[int, ...]  # (C, T, H, W)


@dataclass(frozen=True)
class ComplexityReport:
    records: tuple[LayerRecord, ...]
    input_shape: tuple[int, int, int, int]  # (C, T, H, W)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.records)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.records)

    @property
    def params_millions(self) -> float:
        return self.total_params / 1e6

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def as_text(self) -> str:
        rows = [("layer", "kind", "params", "macs", "output")]
        for r in self.records:
            rows.append(
                (r.name, r.kind, f"{r.params:,}", f"{r.macs:,}",
                 "x".join(str(s) for s in r.out_shape))
            )
        widths = [max(len(row[i]) for row in rows) for i in range(5)]
        lines = []
        for idx, row in enumerate(rows):
            lines.append(
                "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            )
            if idx == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines.append("")
        lines.append(
            f"input 3x{self.input_shape[1]}x{self.input_shape[2]}"
            f"x{self.input_shape[3]}"
        )
        lines.append(
            f"total params {self.total_params:,} ({self.params_millions:.2f} M)"
        )
        lines.append(f"total macs   {self.total_macs:,} ({self.gmacs:.2f} G)")
        return "\n".join(lines)

    def as_json(self) -> str:
        doc = {
            "input_shape": list(self.input_shape),
            "layers": [
                {
                    "name": r.name,
                    "kind": r.kind,
                    "params": r.params,
                    "macs": r.macs,
                    "out_shape": list(r.out_shape),
                }
                for r in self.records
            ],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }
        return json.dumps(doc, indent=2)


def _conv_out_shape(spec: Conv3dSpec, shape):
    _, c, t, h, w = spec.output_shape((1,) + tuple(shape))
    return (c, t, h, w)


def _conv_record(name: str, spec: Conv3dSpec, in_shape) -> LayerRecord:
    out_shape = _conv_out_shape(spec, in_shape)
    out_elems = out_shape[0] * out_shape[1] * out_shape[2] * out_shape[3]
    params = spec.out_channels * (spec.in_channels // spec.groups) * spec.kernel_volume
    if spec.has_bias:
        params += spec.out_channels
    macs = out_elems * (spec.in_channels // spec.groups) * spec.kernel_volume
    return LayerRecord(name, "conv", params, macs, out_shape)


def _bn_record(name: str, shape) -> LayerRecord:
    return LayerRecord(name, "bn", 2 * shape[0], 0, tuple(shape))


def _fc_record(name: str, in_features: int, out_features: int) -> LayerRecord:
    return LayerRecord(
        name, "fc", out_features * in_features + out_features,
        in_features * out_features, (out_features,),
    )


def _block_records(name: str, spec: BlockSpec, in_shape) -> tuple[list, tuple]:
    records = []
    shape = tuple(in_shape)
    for i, cs in enumerate(main_conv_specs(spec), start=1):
        records.append(_conv_record(f"{name}.conv{i}", cs, shape))
        shape = records[-1].out_shape
        records.append(_bn_record(f"{name}.bn{i}", shape))
    if spec.se_enabled:
        c = spec.channels
        hidden = c // spec.se_reduction
        records.append(_fc_record(f"{name}.se.fc1", c, hidden))
        records.append(_fc_record(f"{name}.se.fc2", hidden, c))
    if spec.downsample:
        _, kh, kw = SHORTCUT_POOL_KERNEL
        _, sh, sw = SHORTCUT_POOL_STRIDE
        pooled = (
            in_shape[0],
            in_shape[1],
            conv_output_extent(in_shape[2], kh, sh, 0),
            conv_output_extent(in_shape[3], kw, sw, 0),
        )
        records.append(
            LayerRecord(f"{name}.shortcut.pool", "pool", 0, 0, pooled)
        )
        records.append(
            _conv_record(f"{name}.shortcut.conv", shortcut_conv_spec(spec), pooled)
        )
        sc_shape = records[-1].out_shape
        records.append(_bn_record(f"{name}.shortcut.bn", sc_shape))
        shape = (shape[0] + sc_shape[0],) + shape[1:]
    return records, shape


def layer_records(
    layout: NetworkLayout, input_shape: tuple[int, int, int] | None = None
) -> list[LayerRecord]:
    """Per-layer records in network order for a (T, H, W) input."""
    cfg = layout.config
    if input_shape is None:
        input_shape = (cfg.input_frames, *cfg.input_size)
    shape = (3, *input_shape)
    records = []
    for i, cs in enumerate(layout.stem, start=1):
        records.append(_conv_record(f"stem.conv{i}", cs, shape))
        shape = records[-1].out_shape
        records.append(_bn_record(f"stem.bn{i}", shape))
    for s, stage in enumerate(layout.stages, start=2):
        for b, bs in enumerate(stage, start=1):
            block_recs, shape = _block_records(f"stage{s}.block{b}", bs, shape)
            records.extend(block_recs)
    records.append(LayerRecord("pool", "gap", 0, 0, (shape[0], 1, 1, 1)))
    records.append(_fc_record("fc", layout.fc_in, layout.fc_out))
    return records


def count_params(layout: NetworkLayout) -> int:
    """Learnable parameter total; independent of the input size."""
    # any legal input works for param counting; use the config's own
    return sum(r.params for r in layer_records(layout))


def count_macs(layout: NetworkLayout, input_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulate total for one (T, H, W) crop of one sample."""
    return sum(r.macs for r in layer_records(layout, input_shape))


def report(
    layout_or_config,
    input_shape: tuple[int, int, int] | None = None,
) -> ComplexityReport:
    layout = (
        network_layout(layout_or_config)
        if isinstance(layout_or_config, NetworkConfig)
        else layout_or_config
    )
    cfg = layout.config
    if input_shape is None:
        input_shape = (cfg.input_frames, *cfg.input_size)
    return ComplexityReport(
        records=tuple(layer_records(layout, input_shape)),
        input_shape=(3, *input_shape),
    )
