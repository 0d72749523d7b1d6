"""Run configuration files: flat ``section.key = value`` lines.

The format is deliberately plain so configs diff cleanly in golden
tests. ``#`` starts a full-line comment; keys outside the schema,
duplicate keys, and type errors all fail closed before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .datapipe import PipelineConfig, SyntheticSpec
from .network import NetworkConfig, parse_size
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, parser, help)
def _bool(text: str) -> bool:
    if text in ("true", "false"):
        return text == "true"
    raise ConfigError(f"expected true/false, got {text!r}")


SCHEMA: dict[str, tuple] = {
    "network.variant": ("sev", str, "block family: sev | r2plus1d | r3d"),
    "network.group_width": (8, int, "channels per group in every grouped conv"),
    "network.num_classes": (174, int, "classifier output width"),
    "network.se_enabled": (False, _bool, "add channel gates to every block"),
    "network.se_reduction": (4, int, "bottleneck ratio of the channel gate"),
    "network.dropout": (0.5, float, "dropout rate before the classifier"),
    "network.frames": (16, int, "nominal input frames (complexity reports)"),
    "network.size": ("224", str, "nominal input size, N or HxW"),
    "data.kind": ("synthetic", str, "dataset kind (synthetic)"),
    "data.num_classes": (8, int, "synthetic motion classes"),
    "data.clip_frames": (16, int, "raw frames rendered per clip"),
    "data.height": (256, int, "render height"),
    "data.width": (320, int, "render width"),
    "data.speed": (0.03, float, "drift per frame, fraction of min extent"),
    "data.blob_radius": (0.16, float, "pattern radius, fraction of min extent"),
    "data.train_count": (64, int, "training clips"),
    "data.eval_count": (128, int, "held-out clips"),
    "data.test_count": (0, int, "test clips"),
    "data.seed": (0, int, "master seed of the generator"),
    "data.sampler": ("segment", str, "frame sampler: segment | dense_clip"),
    "data.crop_size": (224, int, "square crop fed to the network"),
    "data.clip_len": (64, int, "raw window length for dense_clip"),
    "data.test_clips": (10, int, "windows per video for dense_clip testing"),
    "train.epochs": (64, int, "training epochs"),
    "train.warmup_epochs": (4, int, "linear warmup epochs"),
    "train.base_lr": (0.01, float, "learning rate per 8-sample batch share"),
    "train.batch_size": (64, int, "effective batch size"),
    "train.accum_steps": (1, int, "micro-batches accumulated per step"),
    "train.momentum": (0.9, float, "SGD momentum"),
    "train.weight_decay": (1e-4, float, "L2 decay on conv/affine weights"),
    "train.loss": ("softmax_cross_entropy", str,
                   "softmax_cross_entropy | multilabel_bce"),
    "train.seed": (0, int, "seed for init, shuffling, augmentation, dropout"),
    "train.eval_every": (1, int, "epochs between held-out evaluations"),
    "train.track_train_accuracy": (True, _bool,
                                   "evaluate the train split every epoch"),
    "output.dir": ("runs/default", str, "directory for logs and checkpoints"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def network(self) -> NetworkConfig:
        v = self.values
        return NetworkConfig(
            variant=v["network.variant"],
            group_width=v["network.group_width"],
            num_classes=v["network.num_classes"],
            se_enabled=v["network.se_enabled"],
            se_reduction=v["network.se_reduction"],
            dropout_rate=v["network.dropout"],
            input_frames=v["network.frames"],
            input_size=parse_size(v["network.size"]),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        if v["data.kind"] != "synthetic":
            raise ConfigError(
                f"unsupported data.kind {v['data.kind']!r}; only 'synthetic' "
                f"data ships with this package"
            )
        return SyntheticSpec(
            num_classes=v["data.num_classes"],
            clip_frames=v["data.clip_frames"],
            height=v["data.height"],
            width=v["data.width"],
            speed=v["data.speed"],
            blob_radius=v["data.blob_radius"],
            train_count=v["data.train_count"],
            eval_count=v["data.eval_count"],
            test_count=v["data.test_count"],
            seed=v["data.seed"],
        )

    def pipeline(self) -> PipelineConfig:
        v = self.values
        return PipelineConfig(
            sampler=v["data.sampler"],
            frames=v["network.frames"],
            crop_size=v["data.crop_size"],
            clip_len=v["data.clip_len"],
            test_clips=v["data.test_clips"],
        )

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            warmup_epochs=v["train.warmup_epochs"],
            base_lr=v["train.base_lr"],
            batch_size=v["train.batch_size"],
            accum_steps=v["train.accum_steps"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            loss=v["train.loss"],
            seed=v["train.seed"],
            eval_every=v["train.eval_every"],
            track_train_accuracy=v["train.track_train_accuracy"],
        )

    def output_dir(self) -> str:
        return self.values["output.dir"]


def parse_items(lines, source: str = "<config>") -> dict:
    """Raw key -> string value with fail-closed validation."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve(raw: dict) -> RunConfig:
    values = {}
    for key, (default, parser, _help) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: bad value {raw[key]!r} ({exc})")
        else:
            values[key] = default
    return RunConfig(values)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as f:
            raw = parse_items(f, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return resolve(raw)


def describe_keys() -> str:
    """One line per config key, for --help output."""
    lines = []
    for key, (default, _parser, help_) in SCHEMA.items():
        shown = str(default).lower() if isinstance(default, bool) else default
        lines.append(f"  {key} (default {shown}): {help_}")
    return "\n".join(lines)
