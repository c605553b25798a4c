import math

from atlasaug.config import TrainConfig
from atlasaug.exceptions import ConfigError

RAMP_SHARPNESS = 5.0
# The cosine decay ends at this fraction of the initial learning rate.
LR_FLOOR_FRACTION = 1e-3


def gaussian_ramp(iteration: int, ramp_length: int) -> float:
    """``exp(-5 (1 - t/T)^2)`` for ``t < T``, then 1."""
    if ramp_length < 1:
        raise ConfigError(f"ramp_length must be >= 1, got {ramp_length}")
    if iteration >= ramp_length:
        return 1.0
    phase = 1.0 - max(iteration, 0) / ramp_length
    return math.exp(-RAMP_SHARPNESS * phase * phase)


def warmup_iterations(config: TrainConfig, epoch_length: int = 1) -> int:
    """Warm-up length in iterations; an epoch is one pass over the unlabeled set."""
    steps_per_epoch = max(math.ceil(epoch_length / config.batch_size), 1)
    return min(config.warmup_epochs * steps_per_epoch, config.n_iterations)


def lr_schedule(iteration: int, config: TrainConfig, epoch_length: int = 1) -> float:
    """Linear warm-up to ``lr_initial``, then cosine decay to ``lr_initial * 1e-3``."""
    warmup = warmup_iterations(config, epoch_length)
    floor = config.lr_initial * LR_FLOOR_FRACTION
    if iteration < warmup:
        return config.lr_initial * iteration / warmup
    if iteration >= config.n_iterations:
        return floor
    progress = (iteration - warmup) / (config.n_iterations - warmup)
    return floor + (config.lr_initial - floor) * (1 + math.cos(math.pi * progress)) / 2
