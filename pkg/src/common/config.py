"""
Configuration management for PointGCN runs.

Values are layered: dataclass defaults, then POINTGCN_* environment
variables (a ``.env`` file is honoured), then a ``key = value`` config
file, then explicit command-line flags.
"""

import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv

from common.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "POINTGCN_"
ENV_KEYS = ("log_level", "log_dir", "threads")

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


# ---------------------------------------------------------------- key = value text

def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_key_values(values: Mapping[str, Any]) -> str:
    """Render a mapping as ``key = value`` lines; floats keep full precision."""
    return "".join(f"{key} = {format_value(value)}\n" for key, value in values.items())


def _parse_lines(text: str, source: str = "<config>") -> Iterator[Tuple[int, str, str]]:
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:line {number}: expected 'key = value', got '{raw.strip()}'")
        yield number, key.strip(), value.strip()


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, later keys win."""
    return {key: value for _, key, value in _parse_lines(text, source)}


def coerce_value(key: str, raw: Any, hint: Any) -> Any:
    """
    Convert a raw value (usually text) to the type named by ``hint``.

    Supports bool, int, float, str, Optional[...] and homogeneous tuples
    written as comma-separated lists.
    """
    if get_origin(hint) is Union:
        inner = [a for a in get_args(hint) if a is not type(None)]
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
            return None
        hint = inner[0]

    if get_origin(hint) is tuple:
        item = get_args(hint)[0] if get_args(hint) else str
        items = raw.split(",") if isinstance(raw, str) else list(raw)
        return tuple(coerce_value(key, v.strip() if isinstance(v, str) else v, item) for v in items if v != "")

    if not isinstance(raw, str):
        try:
            return hint(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"Invalid value {raw!r} for '{key}'") from None

    text = raw.strip()
    if hint is bool:
        lowered = text.lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"Invalid boolean '{raw}' for '{key}'")
    try:
        return hint(text)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value '{raw}' for '{key}': expected {getattr(hint, '__name__', hint)}") from None


def coerce_fields(cls, values: Mapping[str, Any]) -> Dict[str, Any]:
    """Coerce raw values to the field types of dataclass ``cls``; unknown keys raise ConfigError."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown configuration key '{unknown[0]}'")
    return {key: coerce_value(key, raw, hints[key]) for key, raw in values.items()}


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    """Every setting a command can take, with its default."""

    # General
    seed: int = 0
    threads: int = 1
    log_level: str = "INFO"
    log_dir: str = "logs"
    quiet: bool = False

    # Data
    classes: Tuple[str, ...] = ("sphere", "cube", "cylinder", "torus")
    per_class: int = 50
    points: int = 1024
    sample: int = 2048
    noise: float = 0.02

    # Model
    pooling: str = "global"
    knn: int = 40
    order: int = 3
    filters: Tuple[int, ...] = (1000, 1000)
    centroids: int = 55
    cluster_k: int = 50
    cluster_mode: str = "overlap"
    keep_probs: Tuple[float, ...] = (0.9, 0.5)
    weight_decay: float = 2e-4
    sigma: Optional[float] = None
    bias: bool = True
    concat_layer1: bool = False
    dtype: str = "float32"

    # Training
    batch: int = 28
    epochs: int = 100
    lr: float = 1e-3
    class_weights: bool = True

    # Paths
    data: Optional[str] = None
    train: Optional[str] = None
    test: Optional[str] = None
    input: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    out_checkpoint: Optional[str] = None
    report: Optional[str] = None
    resume: Optional[str] = None
    confusion: Optional[str] = None
    index: int = 0

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        """Apply overrides in place, coercing each to its field type."""
        for key, value in coerce_fields(type(self), values).items():
            setattr(self, key, value)
        return self

    @classmethod
    def from_env(cls, env_file: Optional[Union[str, Path]] = None) -> "RunConfig":
        """Defaults overlaid with POINTGCN_LOG_LEVEL, POINTGCN_LOG_DIR and POINTGCN_THREADS."""
        load_dotenv(env_file)
        config = cls()
        overrides = {}
        for key in ENV_KEYS:
            value = os.getenv(ENV_PREFIX + key.upper())
            if value:
                overrides[key] = value
        if overrides:
            logger.debug(f"Environment overrides: {overrides}")
            config.update(overrides)
        return config

    def load_file(self, config_file: Union[str, Path]) -> "RunConfig":
        """
        Overlay a ``key = value`` file.

        Raises:
            ConfigError: on malformed lines or unknown keys, naming the line
        """
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        known = {f.name for f in fields(self)}
        values = {}
        for number, key, value in _parse_lines(path.read_text(encoding="utf-8"), str(path)):
            if key not in known:
                raise ConfigError(f"{path}:line {number}: unknown key '{key}'")
            values[key] = value
        self.update(values)
        logger.info(f"Loaded configuration from {path}")
        return self

    @classmethod
    def from_file(cls, config_file: Union[str, Path]) -> "RunConfig":
        return cls().load_file(config_file)

    def save_to_file(self, config_file: Union[str, Path]) -> None:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        Path(config_file).parent.mkdir(parents=True, exist_ok=True)
        Path(config_file).write_text(format_key_values(values), encoding="utf-8")
        logger.info(f"Saved configuration to {config_file}")

    def validate(self) -> "RunConfig":
        """Raise ConfigError on the first invalid value."""
        for key in ("threads", "per_class", "points", "sample", "knn", "centroids", "cluster_k", "batch", "epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.order < 0:
            raise ConfigError(f"order must be non-negative, got {self.order}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got '{self.log_level}'")
        if not self.classes:
            raise ConfigError("classes must name at least one primitive")
        from pointgcn.data import SYNTH_CLASSES

        unknown = [c for c in self.classes if c not in SYNTH_CLASSES]
        if unknown:
            raise ConfigError(f"Unknown primitive classes {unknown}; choose from {list(SYNTH_CLASSES)}")
        if self.index < 0:
            raise ConfigError(f"index must be non-negative, got {self.index}")
        # model-level rules live on ModelConfig
        self.model_config(class_count=max(2, len(self.classes)))
        return self

    def model_config(self, class_count: int):
        """Project onto a validated ModelConfig for ``class_count`` classes."""
        from pointgcn.model import ModelConfig

        return ModelConfig(
            class_count=class_count,
            knn_k=self.knn,
            cheb_order=self.order,
            filters=self.filters,
            pooling=self.pooling,
            centroid_count=self.centroids,
            cluster_k=self.cluster_k,
            cluster_mode=self.cluster_mode,
            keep_probs=self.keep_probs,
            weight_decay=self.weight_decay,
            sigma=self.sigma,
            use_bias=self.bias,
            multires_concat_layer1=self.concat_layer1,
            dtype=self.dtype,
        ).validate()

    def train_settings(self):
        from pointgcn.train import TrainSettings

        return TrainSettings(
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch,
            seed=self.seed,
            threads=self.threads,
            class_weighting=self.class_weights,
        ).validate()


def load_run_config(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env_file: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Defaults < environment < config file < overrides, validated."""
    config = RunConfig.from_env(env_file)
    if config_file is not None:
        config.load_file(config_file)
    if overrides:
        config.update(overrides)
    return config.validate()
