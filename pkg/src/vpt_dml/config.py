"""
Configuration management for prompt-tuned metric learning experiments.

Every knob of an experiment lives in one of the dataclass sections below:
- `ModelConfig`     the Vision Transformer geometry
- `PeftConfig`      which parameter-efficient method is active (+ adapter / VPT)
- `ProxyConfig`     semantic proxies (class prompts, accumulator, bias fusion)
- `LossConfig`      Proxy-Anchor scale and margin
- `OptimConfig`     optimizer kind and the two learning rates
- `DataConfig`      dataset source, sampler shape and augmentation
- `PretrainConfig`  classifier pretraining of the backbone
- `RunConfig`       steps, evaluation cadence, seed, paging buffer
- `LoggingConfig`   console / file logging

Configuration is layered: dataclass defaults → YAML/JSON file → environment
variables → CLI flags. Files are parsed first and validated afterwards, so
every error names the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from .utils import DMLError

logger = logging.getLogger(__name__)

PEFT_METHODS = ("full", "linear_probe", "bitfit", "adapter", "vpt")
ACCUMULATORS = ("ema", "gru_relu", "gru_tanh")
ABLATION_MODES = ("full", "sample", "shared_encoder", "fixed_encoder")
OPTIMIZER_KINDS = ("sgd", "adaptive", "adaptive_decoupled")
MARGIN_CONVENTIONS = ("literal", "published")
COMPARE_METHODS = (
    "full",
    "linear_probe",
    "bitfit",
    "adapter",
    "vpt",
    "vptsp_m",
    "vptsp_g",
)


class ConfigurationError(DMLError):
    """Raised when a configuration file or value is invalid."""


@dataclass
class ModelConfig:
    """
    Vision Transformer geometry.

    The defaults describe the desk-scale model: 32×32 images cut into 4×4
    patches, six pre-norm blocks of width 64.
    """

    image_size: int = 32
    patch_size: int = 4
    layers: int = 6
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    head_out_dim: int = 64
    init_std: float = 0.02

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "layers", "hidden_dim", "heads",
                     "mlp_ratio", "head_out_dim"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"model.{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"model.image_size ({self.image_size}) must be divisible by "
                f"model.patch_size ({self.patch_size})"
            )
        if self.hidden_dim % self.heads != 0:
            raise ConfigurationError(
                f"model.hidden_dim ({self.hidden_dim}) must be divisible by "
                f"model.heads ({self.heads})"
            )
        if self.init_std <= 0:
            raise ConfigurationError("model.init_std must be positive")


@dataclass
class AdapterConfig:
    """Bottleneck adapter placement."""

    mid_dim: int = 8
    # Applied to the first `num_layers` blocks unless `layers` lists them.
    num_layers: int = 7
    layers: list[int] = field(default_factory=list)
    position: str = "sequential"
    site: str = "post"

    def resolved_layers(self, total_layers: int) -> list[int]:
        if self.layers:
            return sorted(set(self.layers))
        return list(range(min(self.num_layers, total_layers)))

    def validate(self) -> None:
        if self.mid_dim < 1:
            raise ConfigurationError("peft.adapter.mid_dim must be at least 1")
        if self.num_layers < 0:
            raise ConfigurationError("peft.adapter.num_layers cannot be negative")
        if self.position not in ("sequential", "parallel"):
            raise ConfigurationError(
                f"Invalid peft.adapter.position: {self.position}. "
                "Must be one of: sequential, parallel"
            )
        if self.site not in ("pre", "post"):
            raise ConfigurationError(
                f"Invalid peft.adapter.site: {self.site}. Must be one of: pre, post"
            )


@dataclass
class VPTConfig:
    """Deep visual prompts with the decreasing per-layer schedule."""

    num_prompts: int = 10
    tau_step: int = 0
    # Prompts are inserted at the first `num_layers` blocks (None = all).
    num_layers: int | None = None

    def validate(self) -> None:
        if self.num_prompts < 0:
            raise ConfigurationError("peft.vpt.num_prompts cannot be negative")
        if self.tau_step < 0:
            raise ConfigurationError("peft.vpt.tau_step cannot be negative")
        if self.num_layers is not None and self.num_layers < 0:
            raise ConfigurationError("peft.vpt.num_layers cannot be negative")


@dataclass
class PeftConfig:
    method: str = "vpt"
    combine_bitfit: bool = False
    # Insert adapters alongside prompts when method is vpt.
    combine_adapter: bool = False
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    vpt: VPTConfig = field(default_factory=VPTConfig)

    def validate(self) -> None:
        if self.method not in PEFT_METHODS:
            raise ConfigurationError(
                f"Invalid peft.method: {self.method}. "
                f"Must be one of: {', '.join(PEFT_METHODS)}"
            )
        self.adapter.validate()
        self.vpt.validate()


@dataclass
class ProxyConfig:
    """Semantic proxies generated from class-specific prompts."""

    enabled: bool = True
    num_prompts: int = 5
    cls_layers: int = 2
    ema_lambda: float = 0.5
    alpha: float = 0.5
    accumulator: str = "gru_relu"
    ema_textbook: bool = False
    ablation_mode: str = "full"
    include_encoder_prompts: bool = True

    def validate(self) -> None:
        if self.num_prompts < 0:
            raise ConfigurationError("proxy.num_prompts cannot be negative")
        if self.cls_layers < 0:
            raise ConfigurationError("proxy.cls_layers cannot be negative")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigurationError("proxy.ema_lambda must be within [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("proxy.alpha must be within [0, 1]")
        if self.accumulator not in ACCUMULATORS:
            raise ConfigurationError(
                f"Invalid proxy.accumulator: {self.accumulator}. "
                f"Must be one of: {', '.join(ACCUMULATORS)}"
            )
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigurationError(
                f"Invalid proxy.ablation_mode: {self.ablation_mode}. "
                f"Must be one of: {', '.join(ABLATION_MODES)}"
            )


@dataclass
class LossConfig:
    """Proxy-Anchor loss; `pa_scale` is the τ of the loss, not the prompt step."""

    pa_scale: float = 32.0
    margin: float = 0.1
    margin_convention: str = "literal"

    def validate(self) -> None:
        if self.pa_scale <= 0:
            raise ConfigurationError("loss.pa_scale must be positive")
        if self.margin_convention not in MARGIN_CONVENTIONS:
            raise ConfigurationError(
                f"Invalid loss.margin_convention: {self.margin_convention}. "
                f"Must be one of: {', '.join(MARGIN_CONVENTIONS)}"
            )


@dataclass
class OptimConfig:
    kind: str = "adaptive_decoupled"
    lr: float = 1e-3
    lr_proxy: float = 1e-2
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float | None = None

    def validate(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigurationError(
                f"Invalid optim.kind: {self.kind}. "
                f"Must be one of: {', '.join(OPTIMIZER_KINDS)}"
            )
        if self.lr <= 0 or self.lr_proxy <= 0:
            raise ConfigurationError("optim.lr and optim.lr_proxy must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("optim.weight_decay cannot be negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError("optim.betas must be two values in [0, 1)")
        if self.eps <= 0:
            raise ConfigurationError("optim.eps must be positive")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigurationError("optim.max_grad_norm must be positive")


@dataclass
class SyntheticConfig:
    """Clustered synthetic images: one random template per class plus noise."""

    classes: int = 16
    per_class: int = 10
    image_size: int = 32
    cluster_separation: float = 10.0
    noise_std: float = 0.05

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigurationError("data.synthetic.classes must be at least 2")
        if self.per_class < 1:
            raise ConfigurationError("data.synthetic.per_class must be positive")
        if self.image_size <= 0:
            raise ConfigurationError("data.synthetic.image_size must be positive")
        if self.cluster_separation < 0:
            raise ConfigurationError(
                "data.synthetic.cluster_separation cannot be negative"
            )
        if self.noise_std < 0:
            raise ConfigurationError("data.synthetic.noise_std cannot be negative")


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_p: float = 0.5
    scale_min: float = 0.08
    scale_max: float = 1.0
    ratio_min: float = 3.0 / 4.0
    ratio_max: float = 4.0 / 3.0
    # Side of the evaluation center crop relative to the shorter image side.
    eval_crop: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigurationError("data.augment.flip_p must be within [0, 1]")
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            raise ConfigurationError(
                "data.augment scale range must satisfy 0 < scale_min <= scale_max <= 1"
            )
        if not 0.0 < self.ratio_min <= self.ratio_max:
            raise ConfigurationError(
                "data.augment ratio range must satisfy 0 < ratio_min <= ratio_max"
            )
        if not 0.0 < self.eval_crop <= 1.0:
            raise ConfigurationError("data.augment.eval_crop must be within (0, 1]")


@dataclass
class DataConfig:
    source: str = "synthetic"
    folder: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    batch_size: int = 16
    per_class: int = 2
    # Number of classes in the training split (None = first half).
    train_classes: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def classes_per_batch(self) -> int:
        return self.batch_size // self.per_class

    def validate(self) -> None:
        if self.source not in ("synthetic", "folder"):
            raise ConfigurationError(
                f"Invalid data.source: {self.source}. Must be one of: synthetic, folder"
            )
        if self.source == "folder" and not self.folder:
            raise ConfigurationError("data.folder is required when data.source=folder")
        if self.batch_size <= 0 or self.per_class <= 0:
            raise ConfigurationError("data.batch_size and data.per_class must be positive")
        if self.batch_size % self.per_class != 0:
            raise ConfigurationError(
                f"data.batch_size ({self.batch_size}) must be divisible by "
                f"data.per_class ({self.per_class})"
            )
        if self.train_classes is not None and self.train_classes < 1:
            raise ConfigurationError("data.train_classes must be positive")
        self.synthetic.validate()
        self.augment.validate()


@dataclass
class PretrainConfig:
    """Classifier pretraining that stands in for a large-scale checkpoint."""

    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    # Classes held back for pretraining only (None = pretrain on the train split).
    classes: int | None = None

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigurationError("pretrain.steps cannot be negative")
        if self.lr <= 0:
            raise ConfigurationError("pretrain.lr must be positive")
        if self.batch_size <= 0:
            raise ConfigurationError("pretrain.batch_size must be positive")
        if self.classes is not None and self.classes < 1:
            raise ConfigurationError("pretrain.classes must be positive")


@dataclass
class RunConfig:
    steps: int = 300
    eval_every: int = 100
    seed: int = 0
    # None keeps every class prompt resident.
    buffer_capacity: int | None = None
    output_dir: str = "runs/default"
    init_checkpoint: str | None = None
    prefetch: bool = True
    # Wall-clock step times make metrics.csv differ between identical runs.
    record_step_ms: bool = False

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigurationError("run.steps cannot be negative")
        if self.eval_every < 0:
            raise ConfigurationError("run.eval_every cannot be negative")
        if self.buffer_capacity is not None and self.buffer_capacity < 1:
            raise ConfigurationError("run.buffer_capacity must be positive")


@dataclass
class LoggingConfig:
    """Console and file logging."""

    level: str = "INFO"
    # Log file path (None = console only)
    file_path: str | None = None
    format_string: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    max_file_size: str = "10MB"
    backup_count: int = 5

    def validate(self) -> None:
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if self.level.upper() not in valid_levels:
            raise ConfigurationError(
                f"Invalid logging.level: {self.level}. "
                f"Must be one of: {', '.join(valid_levels)}"
            )
        if self.backup_count < 0:
            raise ConfigurationError("logging.backup_count cannot be negative")


@dataclass
class ExperimentConfig:
    """
    Top-level experiment configuration.

    Validation delegates to every section and then checks the constraints
    that span sections (prompt layers versus model depth, paging capacity
    versus batch composition).
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    run: RunConfig = field(default_factory=RunConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def validate(self) -> None:
        self.model.validate()
        self.peft.validate()
        self.proxy.validate()
        self.loss.validate()
        self.optim.validate()
        self.data.validate()
        self.pretrain.validate()
        self.run.validate()
        self.logging.validate()

        layers = self.model.layers
        if self.peft.adapter.mid_dim > self.model.hidden_dim:
            raise ConfigurationError(
                "peft.adapter.mid_dim cannot exceed model.hidden_dim"
            )
        for layer in self.peft.adapter.layers:
            if not 0 <= layer < layers:
                raise ConfigurationError(
                    f"peft.adapter.layers entry {layer} outside [0, {layers})"
                )
        if self.proxy.enabled and self.proxy.cls_layers > layers:
            raise ConfigurationError(
                f"proxy.cls_layers ({self.proxy.cls_layers}) exceeds model.layers "
                f"({layers})"
            )
        capacity = self.run.buffer_capacity
        if capacity is not None and capacity < self.data.classes_per_batch:
            raise ConfigurationError(
                f"run.buffer_capacity ({capacity}) is smaller than the "
                f"{self.data.classes_per_batch} classes per batch"
            )

    def to_dict(self) -> dict[str, Any]:
        """Convert to plain dicts/lists, suitable for JSON or YAML."""
        return _plain(dataclasses.asdict(self))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _expand_dotted(data: dict[str, Any], path: str = "") -> dict[str, Any]:
    """Turn {"model.layers": 2} into {"model": {"layers": 2}}."""
    nested: dict[str, Any] = {}
    for key, value in data.items():
        if not isinstance(key, str):
            raise ConfigurationError(f"Configuration keys must be strings: {path}{key!r}")
        if isinstance(value, dict):
            value = _expand_dotted(value, f"{path}{key}.")
        head, *rest = key.split(".")
        target = nested
        parts = [head, *rest]
        for part in parts[:-1]:
            existing = target.setdefault(part, {})
            if not isinstance(existing, dict):
                raise ConfigurationError(f"Conflicting keys at {path}{key}")
            target = existing
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(target.get(leaf), dict):
            target[leaf] = {**target[leaf], **value}
        else:
            target[leaf] = value
    return nested


def _coerce(value: Any, annotation: Any, path: str) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for option in args:
            if option is type(None):
                continue
            return _coerce(value, option, path)

    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path} must be a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path} must be an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path} must be a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path} must be a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{path} must be a list, got {value!r}")
        return [_coerce(item, args[0], f"{path}[{i}]") for i, item in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigurationError(
                f"{path} must be a list of {len(args)} values, got {value!r}"
            )
        return tuple(
            _coerce(item, arg, f"{path}[{i}]")
            for i, (item, arg) in enumerate(zip(value, args))
        )
    return value


def _apply_mapping(target: Any, data: dict[str, Any], path: str = "") -> None:
    """Copy values from `data` onto the dataclass `target`, recursing into sections."""
    hints = typing.get_type_hints(type(target))
    known = {f.name for f in dataclasses.fields(target)}
    for key, value in data.items():
        dotted = f"{path}{key}"
        if key not in known:
            raise ConfigurationError(f"Unknown configuration key: {dotted}")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{dotted} must be a mapping")
            _apply_mapping(current, value, f"{dotted}.")
        else:
            setattr(target, key, _coerce(value, hints[key], dotted))


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from a (possibly dotted) mapping without validating."""
    config = ExperimentConfig()
    _apply_mapping(config, _expand_dotted(data))
    return config


def load_config(config_path: str | Path | None = None) -> ExperimentConfig:
    """
    Load, override and validate an experiment configuration.

    Args:
        config_path: YAML or JSON file; None or a missing file means defaults

    Returns:
        A validated ExperimentConfig

    Raises:
        ConfigurationError: If the file is unreadable, has unknown keys or
            fails validation

    Example:
        >>> config = load_config("config/config.yaml")
        >>> config.model.layers
        6
    """
    config = ExperimentConfig()

    if config_path is not None and Path(config_path).exists():
        try:
            with open(config_path, encoding="utf-8") as f:
                raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid configuration syntax in {config_path}: {e}")
        except OSError as e:
            raise ConfigurationError(f"Cannot read config file {config_path}: {e}")
        if raw is not None:
            if not isinstance(raw, dict):
                raise ConfigurationError(f"{config_path} must contain a mapping")
            config = config_from_dict(raw)
    elif config_path is not None:
        logger.info("Config file not found: %s; using defaults", config_path)

    config = _apply_environment_overrides(config)
    config.validate()
    return config


def _apply_environment_overrides(config: ExperimentConfig) -> ExperimentConfig:
    """
    Apply DML_{SECTION}_{SETTING} environment overrides.

    Only settings that are commonly changed per machine are exposed here;
    everything else belongs in the config file.
    """
    if log_level := os.getenv("DML_LOGGING_LEVEL"):
        config.logging.level = log_level.upper()

    if log_file := os.getenv("DML_LOGGING_FILE_PATH"):
        config.logging.file_path = log_file

    if output_dir := os.getenv("DML_RUN_OUTPUT_DIR"):
        config.run.output_dir = output_dir

    if seed := os.getenv("DML_RUN_SEED"):
        try:
            config.run.seed = int(seed)
        except ValueError:
            raise ConfigurationError(f"Invalid DML_RUN_SEED: {seed}")

    return config


def save_config(config: ExperimentConfig, config_path: str | Path) -> None:
    """
    Save configuration as JSON (for .json paths) or YAML.

    Raises:
        ConfigurationError: If the file cannot be written
    """
    config_file = Path(config_path)
    config_file.parent.mkdir(parents=True, exist_ok=True)
    payload = config.to_dict()
    try:
        with open(config_file, "w", encoding="utf-8") as f:
            if config_file.suffix.lower() == ".json":
                json.dump(payload, f, indent=2)
                f.write("\n")
            else:
                yaml.safe_dump(payload, f, default_flow_style=False, sort_keys=False)
    except OSError as e:
        raise ConfigurationError(f"Cannot write config file {config_path}: {e}")
    logger.info("Configuration saved to %s", config_file)


def config_for_method(base: ExperimentConfig, method: str) -> ExperimentConfig:
    """
    Derive the configuration of one row of the method-comparison table.

    `method` is one of COMPARE_METHODS, optionally suffixed with "+bitfit".
    `vptsp_m` and `vptsp_g` are VPT with semantic proxies accumulated by EMA
    and by the GRU respectively; every other method trains plain proxies.
    """
    name, _, suffix = method.partition("+")
    if name not in COMPARE_METHODS or suffix not in ("", "bitfit"):
        raise ConfigurationError(
            f"Unknown method: {method}. Must be one of: "
            f"{', '.join(COMPARE_METHODS)} (optionally with +bitfit)"
        )
    config = config_from_dict(base.to_dict())
    config.peft.combine_bitfit = suffix == "bitfit"
    if name.startswith("vptsp"):
        config.peft.method = "vpt"
        config.proxy.enabled = True
        if name == "vptsp_m":
            config.proxy.accumulator = "ema"
        elif config.proxy.accumulator == "ema":
            config.proxy.accumulator = "gru_relu"
    else:
        config.peft.method = name
        config.proxy.enabled = False
    return config


def create_default_config_file(config_path: str | Path = "config/config.yaml") -> None:
    """Write the commented desk-scale configuration used by `dml init-config`."""
    config_file = Path(config_path)
    config_file.parent.mkdir(parents=True, exist_ok=True)
    try:
        config_file.write_text(DEFAULT_CONFIG_YAML, encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot create config file {config_path}: {e}")
    logger.info("Created default configuration: %s", config_file)


DEFAULT_CONFIG_YAML = """\
# Prompt-tuned metric learning experiment
# Every key below is optional; omitted keys keep their defaults.

# Vision Transformer geometry (desk scale)
model:
  image_size: 32
  patch_size: 4
  layers: 6
  hidden_dim: 64
  heads: 4
  head_out_dim: 64

# Parameter-efficient method: full, linear_probe, bitfit, adapter, vpt
peft:
  method: vpt
  combine_bitfit: false
  vpt:
    num_prompts: 10   # N, prompts at layer 0
    tau_step: 0       # prompts at layer i: max(N - tau_step * i, 0)
  adapter:
    mid_dim: 8
    num_layers: 7
    position: sequential   # sequential or parallel
    site: post             # pre (attention) or post (MLP)

# Semantic proxies built from class-specific prompts
proxy:
  enabled: true
  num_prompts: 5        # m prompts per class
  cls_layers: 2         # first layers that receive class prompts
  accumulator: gru_relu # ema, gru_relu, gru_tanh
  ema_lambda: 0.5
  alpha: 0.5            # weight of the randomly initialized bias proxies
  ablation_mode: full   # full, sample, shared_encoder, fixed_encoder

# Proxy-Anchor loss
loss:
  pa_scale: 32.0
  margin: 0.1

# Optimizer: sgd, adaptive, adaptive_decoupled
optim:
  kind: adaptive_decoupled
  lr: 0.001
  lr_proxy: 0.01
  weight_decay: 0.0001

# Data: synthetic clusters or an image folder (root/<class>/<image>.ppm)
data:
  source: synthetic
  batch_size: 16
  per_class: 2
  synthetic:
    classes: 16
    per_class: 10
    noise_std: 0.05

# Backbone pretraining; classes: N reserves the first N classes for it alone
pretrain:
  steps: 500
  lr: 0.001
  classes: null

run:
  steps: 300
  eval_every: 100
  seed: 0
  buffer_capacity: null   # null keeps every class prompt resident
  output_dir: runs/default

logging:
  level: INFO
  file_path: null
"""
