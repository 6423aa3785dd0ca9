import argparse
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional, get_args, get_origin

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, LightX3ECGError
from .model import BackboneConfig, ModelSpec, StageConfig
from .training import TrainConfig

RUNS_DIR_ENV = "LX3ECG_RUNS_DIR"
LOG_LEVEL_ENV = "LX3ECG_LOG_LEVEL"


def load_environment() -> None:
    """Pick up ``.env`` defaults (runs directory, log level)."""
    load_dotenv()


class RunConfig(BaseModel):
    """Flat run configuration: one key per line in the config file, one ``--flag`` per key."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # training
    lr0: float = 1e-3
    lr_min: float = 1e-4
    weight_decay: float = 5e-5
    epochs_total: int = 70
    epochs_cosine: int = 40
    batch_size: int = 32
    task: str = "multi_class"
    droplead_p: float = 0.5
    seed: int = 0
    kfold: int = 10
    folds: Optional[int] = None
    # backbone
    stem_kernel: int = 15
    stem_stride: int = 2
    stem_channels: int = 64
    stem_pool: bool = True
    stage_blocks: List[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    stage_channels: List[int] = Field(default_factory=lambda: [64, 128, 256, 512])
    block_kernel: int = 7
    se_reduction: int = 16
    # attention
    attention_hidden: Optional[int] = None
    attention_dropout: float = 0.3
    # data
    leads: List[str] = Field(default_factory=lambda: ["I", "II", "V1"])
    standardize: bool = True
    input_length: int = 5000
    manifest: Optional[str] = None
    # compression
    sparsity: float = 0.8
    prune_mode: str = "global"
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    # sparse-checkpoint index layout: varint (LEB128 gaps between kept positions, the default) or flat32
    index_encoding: str = "varint"
    # run
    name: str = "default"
    runs_dir: str = Field(default_factory=lambda: os.getenv(RUNS_DIR_ENV, "runs"))

    @model_validator(mode="after")
    def _check(self):
        if len(self.stage_blocks) != len(self.stage_channels):
            raise ValueError(f"stage_blocks {self.stage_blocks} and stage_channels {self.stage_channels} "
                             f"must have the same length")
        if len(self.leads) != 3:
            raise ValueError(f"leads must name exactly 3 leads, got {self.leads}")
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in (0, 1), got {self.sparsity}")
        if self.prune_mode not in ("global", "layer"):
            raise ValueError(f"prune_mode must be global or layer, got '{self.prune_mode}'")
        if self.index_encoding not in ("varint", "flat32"):
            raise ValueError(f"index_encoding must be varint or flat32, got '{self.index_encoding}'")
        if self.folds is not None and not 1 <= self.folds <= self.kfold:
            raise ValueError(f"folds must be in [1, kfold={self.kfold}], got {self.folds}")
        return self

    def train_config(self) -> TrainConfig:
        fields = TrainConfig.model_fields
        try:
            return TrainConfig(**{k: getattr(self, k) for k in fields})
        except ValidationError as e:
            raise ConfigError(_describe(e)) from None

    def model_spec(self, n_classes: int) -> ModelSpec:
        stages = [
            StageConfig(blocks=b, out_ch=c, kernel=self.block_kernel, stride=1 if i == 0 else 2)
            for i, (b, c) in enumerate(zip(self.stage_blocks, self.stage_channels))
        ]
        try:
            backbone = BackboneConfig(stem_kernel=self.stem_kernel, stem_stride=self.stem_stride,
                                      stem_channels=self.stem_channels, stem_pool=self.stem_pool,
                                      stages=stages, se_reduction=self.se_reduction)
            return ModelSpec(backbone=backbone, n_classes=n_classes, input_length=self.input_length,
                             attention_hidden=self.attention_hidden, attention_dropout=self.attention_dropout)
        except ValidationError as e:
            raise ConfigError(_describe(e)) from None

    def to_text(self) -> str:
        """Effective config in the file format read by ``load_config``."""
        lines = []
        for key in type(self).model_fields:
            value = getattr(self, key)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        key = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{key}: {item['msg']}")
    return "invalid configuration: " + "; ".join(parts)


def _is_list(key: str) -> bool:
    return get_origin(RunConfig.model_fields[key].annotation) in (list, List)


def _is_optional(key: str) -> bool:
    return type(None) in get_args(RunConfig.model_fields[key].annotation)


def coerce_value(key: str, raw: str) -> Any:
    """Turn one textual value into what pydantic expects for ``key``."""
    if key not in RunConfig.model_fields:
        raise ConfigError(f"unknown config key '{key}'")
    raw = raw.strip()
    if _is_optional(key) and raw.lower() in ("", "none"):
        return None
    if _is_list(key):
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in RunConfig.model_fields:
            raise ConfigError(f"{source}:{line_no}: unknown config key '{key}'")
        values[key] = coerce_value(key, raw)
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from an optional file plus flag overrides (flags win)."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        values.update(parse_config_text(text, str(path)))
    for key, value in (overrides or {}).items():
        values[key] = coerce_value(key, value) if isinstance(value, str) else value
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from None


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """One ``--key-name`` flag per RunConfig field, plus ``--config``."""
    parser.add_argument("--config", help="config file with 'key = value' lines")
    group = parser.add_argument_group("config overrides")
    for key, info in RunConfig.model_fields.items():
        default = info.default_factory() if info.default_factory is not None else info.default
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE",
                           help=f"(default: {default})")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key) for key in RunConfig.model_fields if getattr(args, key, None) is not None}
    return load_config(getattr(args, "config", None), overrides)


class RunDirectory:
    """``<runs_dir>/<name>/{config, checkpoints/, metrics, figures/}`` guarded by a lock file."""

    def __init__(self, runs_dir, name: str):
        self.root = Path(runs_dir) / name
        self.config = self.root / "config"
        self.checkpoints = self.root / "checkpoints"
        self.metrics = self.root / "metrics"
        self.report = self.root / "metrics.txt"
        self.figures = self.root / "figures"
        self.lock_path = self.root / ".lock"

    def create(self) -> "RunDirectory":
        for path in (self.root, self.checkpoints, self.figures):
            path.mkdir(parents=True, exist_ok=True)
        return self

    def write_config(self, cfg: RunConfig) -> Path:
        self.config.write_text(cfg.to_text(), encoding="utf-8")
        return self.config

    @contextmanager
    def lock(self):
        self.create()
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LightX3ECGError(f"run directory {self.root} is locked by another command "
                                  f"(remove {self.lock_path} if no command is running)") from None
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            logging.debug(f"Acquired lock {self.lock_path}")
            yield self
        finally:
            self.lock_path.unlink(missing_ok=True)
