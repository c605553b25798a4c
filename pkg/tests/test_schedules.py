import math

import pytest

from atlasaug.config import TrainConfig
from atlasaug.exceptions import ConfigError
from atlasaug.schedules import gaussian_ramp, lr_schedule, warmup_iterations


@pytest.mark.parametrize(
    "iteration,expected",
    [(0, 0.006738), (50, 0.2865), (100, 1.0), (250, 1.0)],
)
def test_gaussian_ramp(iteration, expected):
    assert gaussian_ramp(iteration, 100) == pytest.approx(expected, abs=1e-4)


def test_gaussian_ramp_is_monotone():
    values = [gaussian_ramp(iteration, 40) for iteration in range(60)]
    assert all(low <= high for low, high in zip(values, values[1:]))


def test_gaussian_ramp_rejects_an_empty_ramp():
    with pytest.raises(ConfigError):
        gaussian_ramp(0, 0)


@pytest.fixture
def config():
    return TrainConfig(n_iterations=1000, lr_initial=1e-2, warmup_epochs=5)


def test_warmup_iterations(config):
    assert warmup_iterations(config, epoch_length=10) == 50
    assert warmup_iterations(config, epoch_length=10_000) == 1000
    assert warmup_iterations(config.replace(warmup_epochs=0), epoch_length=10) == 0


def test_warmup_epoch_counts_batches(config):
    assert warmup_iterations(config.replace(batch_size=4), epoch_length=10) == 5 * 3
    assert warmup_iterations(config.replace(batch_size=10), epoch_length=10) == 5
    assert warmup_iterations(config.replace(batch_size=4), epoch_length=2) == 5


@pytest.mark.parametrize(
    "iteration,expected",
    [(0, 0.0), (25, 5e-3), (50, 1e-2), (525, 5.005e-3), (1000, 1e-5), (2000, 1e-5)],
)
def test_lr_schedule(config, iteration, expected):
    assert lr_schedule(iteration, config, epoch_length=10) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_lr_schedule_without_warmup_starts_at_the_initial_rate(config):
    assert lr_schedule(0, config.replace(warmup_epochs=0), epoch_length=10) == 1e-2


def test_lr_schedule_decays_monotonically_after_warmup(config):
    rates = [lr_schedule(iteration, config, epoch_length=10) for iteration in range(50, 1001, 25)]
    assert all(high >= low for high, low in zip(rates, rates[1:]))
    assert math.isclose(rates[-1], config.lr_initial * 1e-3)
