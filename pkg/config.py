import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from core.exceptions import ConfigError, ParseError
from models.training import GEN_OPTIMIZERS, LOSS_VARIANTS, SUPERVISED_MODES

logger = logging.getLogger(__name__)


def _integral(value: Any) -> Any:
    """Accept '1e5' style spellings for integer keys"""
    if isinstance(value, str):
        text = value.strip()
        try:
            return int(text)
        except ValueError:
            number = float(text)
            if number.is_integer():
                return int(number)
            raise ValueError(f"expected an integer, got '{value}'")
    return value


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    segments: int = 20
    samples_per_segment: int = 20
    probe_spacing: float = math.sqrt(2.0)
    height: int = 96
    width: int = 96
    over_edge_penalty: float = 0.1

    @field_validator("segments", "samples_per_segment", "height", "width", mode="before")
    @classmethod
    def _integer_fields(cls, v):
        return _integral(v)

    @field_validator("segments", "samples_per_segment", "height", "width")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("probe_spacing")
    @classmethod
    def _spacing(cls, v):
        if v < math.sqrt(2.0) - 1e-9:
            raise ValueError("probe spacing must be at least 2^(1/2) px")
        return v

    @field_validator("over_edge_penalty")
    @classmethod
    def _penalty(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @property
    def probes_per_episode(self) -> int:
        return self.segments * self.samples_per_segment


class TrainConfig(BaseModel):
    """Every hyperparameter of the training loop; class defaults are the full-scale values"""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    iterations: int = 1_000_000
    batch_size: int = 32
    gamma: float = 0.97
    beta_critic: float = 0.9997
    beta_actor: float = 0.9997
    beta_loss: float = 0.997
    lr_actor: float = 0.0005
    lr_critic: float = 0.0010
    lr_generator: float = 0.0030
    lr_decay_base: float = 0.75
    lr_decay_exponent: float = 5.0
    lr_period_fraction: float = 2.0 / 9.0
    lr_floor: float = 0.2
    lr_sawtooth: str = "down"
    gen_optimizer: str = "adam"
    lr_sweep: bool = False
    lr_sweep_start: float = -6.5
    lr_sweep_stop: float = 0.5
    ou_theta: float = 0.1
    ou_sigma: float = 0.2
    ou_mean: float = 0.0
    ou_start: float = 0.0
    noise_decay: bool = True
    clip_enabled: bool = True
    normalize_losses: bool = True
    loss_variant: str = "mse"
    sobel_weight: float = 0.1
    region_size: int = 5
    supervised_mode: str = "off"
    supervised_decay_iterations: int = 100_000
    actor_gradient: str = "live"
    replay_capacity: int = 100_000
    seed: int = 0
    hidden_size: int = 256
    gen_channels: Tuple[int, ...] = (64, 128, 256)
    gen_res_blocks: int = 8
    init_std: float = 0.02
    gen_weight_decay: float = 0.99999
    eval_every: int = 0
    checkpoint_every: int = 0
    eval_limit: int = 0

    @field_validator("iterations", "batch_size", "region_size", "supervised_decay_iterations",
                     "replay_capacity", "seed", "hidden_size", "gen_res_blocks",
                     "eval_every", "checkpoint_every", "eval_limit", mode="before")
    @classmethod
    def _integer_fields(cls, v):
        return _integral(v)

    @field_validator("gen_channels", mode="before")
    @classmethod
    def _channel_list(cls, v):
        if isinstance(v, str):
            return tuple(int(part) for part in v.replace(" ", "").split(",") if part)
        return v

    @field_validator("iterations", "eval_every", "checkpoint_every", "eval_limit", "seed")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("batch_size")
    @classmethod
    def _batch(cls, v):
        if v < 2:
            raise ValueError("batch size must be >= 2 for batch-normalized generator training")
        return v

    @field_validator("replay_capacity", "hidden_size", "region_size", "supervised_decay_iterations")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("gamma")
    @classmethod
    def _discount(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        return v

    @field_validator("beta_critic", "beta_actor", "beta_loss", "lr_floor", "gen_weight_decay", "lr_decay_base")
    @classmethod
    def _unit_interval(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("lr_actor", "lr_critic", "lr_generator", "lr_period_fraction", "ou_theta")
    @classmethod
    def _rate(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("must lie in (0, 1]")
        return v

    @field_validator("ou_sigma", "sobel_weight", "init_std", "lr_decay_exponent")
    @classmethod
    def _non_negative_float(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("lr_sawtooth")
    @classmethod
    def _sawtooth(cls, v):
        if v not in ("down", "up"):
            raise ValueError("must be 'down' or 'up'")
        return v

    @field_validator("gen_optimizer")
    @classmethod
    def _optimizer(cls, v):
        if v not in GEN_OPTIMIZERS:
            raise ValueError(f"must be one of {GEN_OPTIMIZERS}")
        return v

    @field_validator("loss_variant")
    @classmethod
    def _variant(cls, v):
        if v not in LOSS_VARIANTS:
            raise ValueError(f"must be one of {LOSS_VARIANTS}")
        return v

    @field_validator("supervised_mode")
    @classmethod
    def _supervised(cls, v):
        if v not in SUPERVISED_MODES:
            raise ValueError(f"must be one of {SUPERVISED_MODES}")
        return v

    @field_validator("actor_gradient")
    @classmethod
    def _actor_gradient(cls, v):
        if v not in ("live", "replayed"):
            raise ValueError("must be 'live' or 'replayed'")
        return v

    @field_validator("gen_channels")
    @classmethod
    def _channels(cls, v):
        if len(v) < 1 or any(c < 1 for c in v):
            raise ValueError("needs at least one positive channel count")
        return v

    @model_validator(mode="after")
    def _sweep_range(self):
        if self.lr_sweep_start >= self.lr_sweep_stop:
            raise ValueError("lr_sweep_start must be below lr_sweep_stop")
        return self

    def eval_interval(self) -> int:
        return self.eval_every or max(self.iterations // 100, 1)

    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or max(self.iterations // 10, 1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    preset: str = "desk"
    dataset: str = ""
    output_dir: str = "runs/latest"
    checkpoint: str = ""
    synth_count: int = 2048
    synth_seed: int = 1
    train_fraction: float = 0.8
    log_level: str = "INFO"
    env: EnvConfig = EnvConfig()
    train: TrainConfig = TrainConfig()

    @field_validator("synth_count", "synth_seed", mode="before")
    @classmethod
    def _integer_fields(cls, v):
        return _integral(v)

    @field_validator("synth_count")
    @classmethod
    def _count(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("train_fraction")
    @classmethod
    def _fraction(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("must lie in (0, 1)")
        return v

    @field_validator("preset")
    @classmethod
    def _preset(cls, v):
        if v not in PRESETS:
            raise ValueError(f"unknown preset, expected one of {sorted(PRESETS)}")
        return v

    @model_validator(mode="after")
    def _generator_geometry(self):
        stride = 2 ** len(self.train.gen_channels)
        if self.env.height % stride or self.env.width % stride:
            raise ValueError(f"image extents must be divisible by the generator stride {stride}")
        return self

    def resolved_items(self) -> List[Tuple[str, Any]]:
        items = [(k, getattr(self, k)) for k in RUN_KEYS]
        items += [(k, getattr(self.env, k)) for k in ENV_KEYS]
        items += [(k, getattr(self.train, k)) for k in TRAIN_KEYS]
        return items


PRESETS: Dict[str, Dict[str, Any]] = {
    "paper": {
        "iterations": 1_000_000,
        "batch_size": 32,
        "replay_capacity": 100_000,
        "hidden_size": 256,
        "gen_channels": (64, 128, 256),
        "gen_res_blocks": 8,
        "synth_count": 19769,
    },
    "desk": {
        "iterations": 5000,
        "batch_size": 16,
        "replay_capacity": 2000,
        "hidden_size": 64,
        "gen_channels": (32, 64, 128),
        "gen_res_blocks": 4,
        "synth_count": 2048,
    },
}

RUN_KEYS = [k for k in RunConfig.model_fields if k not in ("env", "train")]
ENV_KEYS = list(EnvConfig.model_fields)
TRAIN_KEYS = list(TrainConfig.model_fields)
ALL_KEYS = set(RUN_KEYS) | set(ENV_KEYS) | set(TRAIN_KEYS)


def build_run_config(preset: str, overrides: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """Apply a preset, then explicit flat key overrides, and validate the result"""
    lines = lines or {}
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    flat = dict(PRESETS[preset])
    flat.update(overrides)
    flat["preset"] = preset

    for key in flat:
        if key not in ALL_KEYS:
            where = f" (line {lines[key]})" if key in lines else ""
            raise ConfigError(f"unknown configuration key '{key}'{where}")

    run_fields = {k: v for k, v in flat.items() if k in RUN_KEYS}
    env_fields = {k: v for k, v in flat.items() if k in ENV_KEYS}
    train_fields = {k: v for k, v in flat.items() if k in TRAIN_KEYS}
    try:
        return RunConfig(env=EnvConfig(**env_fields), train=TrainConfig(**train_fields), **run_fields)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else "configuration"
        where = f" (line {lines[key]})" if key in lines else ""
        raise ConfigError(f"invalid value for '{key}'{where}: {error['msg']}")


def read_config_file(path: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got '{raw.strip()}'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown configuration key '{key}' (line {number})")
        values[key] = value
        lines[key] = number
    return values, lines


def log_config(config: RunConfig) -> None:
    for key, value in config.resolved_items():
        logger.info("config %s = %s", key, value)


def parse_config(path: Optional[str] = None, preset: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None, echo: bool = True) -> RunConfig:
    """
    Resolve a RunConfig: preset first (desk unless the file or caller names one),
    then the file's keys, then caller overrides (command-line flags).
    """
    values, lines = read_config_file(path) if path else ({}, {})
    chosen = preset or values.pop("preset", None) or "desk"
    values.pop("preset", None)
    merged: Dict[str, Any] = dict(values)
    merged.update(overrides or {})
    config = build_run_config(chosen, merged, lines)
    if echo:
        log_config(config)
    return config


@lru_cache()
def _preset_config(name: str) -> RunConfig:
    return build_run_config(name, {})


def get_preset(name: str = "desk") -> RunConfig:
    return _preset_config(name).model_copy(deep=True)
