"""Config tree for training runs: YAML in, canonical YAML out, every leaf
overridable from the command line with dotted `key=value` settings."""

import os
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from mcsam.encoder import EncoderConfig
from mcsam.exceptions import ConfigurationError
from mcsam.losses import LossConfig
from mcsam.peft import FreezePolicy
from mcsam.pixel_decoder import PixelDecoderConfig
from mcsam.transformer_decoder import DecoderConfig


@dataclass
class DataConfig:
    train_annotations: str = ""
    train_images: str = ""
    val_annotations: str = ""
    val_images: str = ""
    image_size: int = 1024
    mean: tuple = (123.675, 116.28, 103.53)
    std: tuple = (58.395, 57.12, 57.375)
    hflip_prob: float = 0.5
    batch_size: int = 32
    accum_steps: int = 1
    num_workers: int = 0

    def __post_init__(self):
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)


@dataclass
class WeightsConfig:
    source: str = "none"  # sam | vit | none
    path: str = ""

    def __post_init__(self):
        if self.source not in ("sam", "vit", "none"):
            raise ConfigurationError(f"unknown weight source {self.source!r}")


@dataclass
class PeftConfig:
    method: str = "mona"  # mona | adapter | lora | none
    mona_bottleneck: int = 64
    mona_kernel_sizes: tuple = (3, 5, 7)
    adapter_bottleneck: int = 64
    lora_rank: int = 4
    lora_alpha: float = 4.0

    def __post_init__(self):
        self.mona_kernel_sizes = tuple(self.mona_kernel_sizes)
        if self.method not in ("mona", "adapter", "lora", "none"):
            raise ConfigurationError(f"unknown peft method {self.method!r}")


@dataclass
class AggregatorSettings:
    mid_channels: int = 256
    norm: str = "ln2d"


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    clip_grad_norm: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


@dataclass
class ScheduleConfig:
    warmup_epochs: float = 1.0
    min_lr: float = 1e-6


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    output_dir: str = "runs/default"
    epochs: int = 300
    eval_interval: int = 10  # epochs between val evaluations
    log_interval: int = 10  # steps between log lines
    freeze_policy: str = "mcsam"  # preset name or policy-file path
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    aggregator: AggregatorSettings = field(default_factory=AggregatorSettings)
    pixel_decoder: PixelDecoderConfig = field(default_factory=PixelDecoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")


POLICY_PRESETS = {
    "mcsam": FreezePolicy(
        frozen_patterns=["encoder.*"],
        trainable_patterns=["encoder.*.mona*", "neck.*", "decoder.*"],
    ),
    "mcsam_adapter": FreezePolicy(
        frozen_patterns=["encoder.*"],
        trainable_patterns=["encoder.*.adapter*", "neck.*", "decoder.*"],
    ),
    "mcsam_lora": FreezePolicy(
        frozen_patterns=["encoder.*"],
        trainable_patterns=["encoder.*.lora_*", "neck.*", "decoder.*"],
    ),
    "encoder_frozen": FreezePolicy(
        frozen_patterns=["encoder.*"], trainable_patterns=["neck.*", "decoder.*"]
    ),
    "vit_frozen": FreezePolicy(
        frozen_patterns=["encoder.*"],
        trainable_patterns=["encoder.neck.*", "neck.*", "decoder.*"],
    ),
    "vit_mona": FreezePolicy(
        frozen_patterns=["encoder.*"],
        trainable_patterns=["encoder.neck.*", "encoder.*.mona*", "neck.*", "decoder.*"],
    ),
    "full_finetune": FreezePolicy(frozen_patterns=[], trainable_patterns=["*"]),
    "all_frozen": FreezePolicy(frozen_patterns=["*"], trainable_patterns=[]),
}


def resolve_policy(name_or_path: str) -> FreezePolicy:
    if name_or_path in POLICY_PRESETS:
        return POLICY_PRESETS[name_or_path]
    if os.path.exists(name_or_path):
        return FreezePolicy.from_file(name_or_path)
    raise ConfigurationError(
        f"freeze_policy {name_or_path!r} is neither a preset ({sorted(POLICY_PRESETS)}) nor a file"
    )


def to_plain(obj):
    if is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _from_plain(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if is_dataclass(f.type) and isinstance(value, dict):
            kwargs[f.name] = _from_plain(f.type, value)
        else:
            kwargs[f.name] = value
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_plain(RunConfig, data or {})


def config_to_yaml(cfg: RunConfig) -> str:
    """Canonical serialized form: sorted keys, default flow off."""
    return yaml.safe_dump(to_plain(cfg), sort_keys=True, default_flow_style=False)


def load_config(path, overrides=()) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    data = apply_overrides(data, overrides)
    return config_from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply `a.b.c=value` settings onto the plain config dict; values are
    parsed as YAML so numbers, lists and booleans work."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends through a leaf")
        node[parts[-1]] = value
    return data
