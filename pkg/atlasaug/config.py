"""Training configuration and its flat ``key = value`` file format."""
import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from atlasaug.exceptions import ConfigError
from atlasaug.losses import LossWeights
from atlasaug.retrying import retry_io

DEVICE_ENVIRONMENT_VARIABLE = "ATLASAUG_DEVICE"
SAMPLING_MODES = ("none", "beta", "adversarial")
# Fields that do not change what is trained and are left out of the config hash.
_UNHASHED_FIELDS = ("device", "checkpoint_every")
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _default_device() -> str:
    return os.environ.get(DEVICE_ENVIRONMENT_VARIABLE, "cpu")


@dataclass(frozen=True)
class TrainConfig:
    n_iterations: int = 50_000
    lr_initial: float = 1e-2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    warmup_epochs: int = 5
    lambda_smooth: float = 15.0
    lambda_dice: float = 10.0
    lambda_kl: float = 1e-4
    lambda_rec: float = 0.5
    # Iterations of the Gaussian warm-up; None means 10% of n_iterations.
    ramp_length: Optional[int] = None
    inversion_iters: int = 10
    seed: int = 0
    batch_size: int = 1
    checkpoint_every: int = 1000
    eval_every: int = 500
    early_stop_patience: int = 5
    min_improvement: float = 0.001
    sampling: str = "adversarial"
    rectification: bool = True
    fb_consistency: bool = True
    freeze_reg_after: Optional[int] = None
    mixed_precision: bool = False
    levels: int = 4
    base_channels: int = 16
    beta_shape: float = 0.5
    device: str = field(default_factory=_default_device)

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("lr_initial", "inversion_iters", "batch_size", "checkpoint_every", "eval_every")
        positive += ("early_stop_patience", "beta_shape")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_iterations", "weight_decay", "momentum", "warmup_epochs", "min_improvement"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.ramp_length is not None and not 1 <= self.ramp_length <= max(self.n_iterations, 1):
            raise ConfigError(f"ramp_length must lie in [1, n_iterations], got {self.ramp_length}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got '{self.sampling}'")
        if self.levels < 2 or self.base_channels < 4:
            raise ConfigError("levels must be >= 2 and base_channels >= 4")
        if self.freeze_reg_after is not None and self.freeze_reg_after < 0:
            raise ConfigError(f"freeze_reg_after must be >= 0, got {self.freeze_reg_after}")
        LossWeights(self.lambda_smooth, self.lambda_dice, self.lambda_kl, self.lambda_rec)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_smooth, self.lambda_dice, self.lambda_kl, self.lambda_rec)

    @property
    def effective_ramp_length(self) -> int:
        if self.ramp_length is not None:
            return self.ramp_length
        return max(1, self.n_iterations // 10)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical config text."""
        text = dump_config(self, exclude=_UNHASHED_FIELDS)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


_FIELDS = {config_field.name: config_field for config_field in dataclasses.fields(TrainConfig)}


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    hints = typing.get_type_hints(TrainConfig)
    values = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{raw_line.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {number}: unknown key '{key}'")
        values[key] = _coerce(value, hints[key], key, number)
    return TrainConfig(**values)


def load_config(path: Union[str, Path]) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError(f"unable to read config file '{path}'") from error
    return parse_config(text)


def config_from_dict(values: dict) -> TrainConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)


def dump_config(config: TrainConfig, exclude: typing.Iterable[str] = ()) -> str:
    lines = []
    for name in _FIELDS:
        if name in exclude:
            continue
        value = getattr(config, name)
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


@retry_io
def save_config(config: TrainConfig, path: Union[str, Path]):
    """Write `dump_config` output to ``path``, retrying transient filesystem errors."""
    Path(path).write_text(dump_config(config), encoding="utf-8")


def _coerce(value: str, hint, key: str, number: int):
    optional = typing.get_origin(hint) is Union and type(None) in typing.get_args(hint)
    if optional:
        if value.lower() in ("", "none", "null"):
            return None
        hint = next(arg for arg in typing.get_args(hint) if arg is not type(None))
    try:
        if hint is bool:
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if hint is int:
            return int(value.replace("_", ""))
        if hint is float:
            return float(value)
        return value
    except ValueError as error:
        raise ConfigError(f"line {number}: invalid value '{value}' for {key}") from error
