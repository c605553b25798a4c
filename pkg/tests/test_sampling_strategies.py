import pytest
import torch

from atlasaug.exceptions import ConfigError
from atlasaug.networks import AdversarialNet
from atlasaug.sampling_strategies import (
    AdversarialSamplingStrategy,
    BaseSamplingStrategy,
    BetaSamplingStrategy,
    FixedSamplingStrategy,
    NeutralSamplingStrategy,
)


def test_beta_sampling_shapes_and_ranges():
    alpha, beta = BetaSamplingStrategy(seed=1).sample(torch.zeros(3, 1, 8, 8))
    assert alpha.shape == (3, 2, 1, 1)
    assert beta.shape == (3, 1, 1, 1)
    assert alpha.dtype == torch.float32
    assert bool(((alpha >= 0) & (alpha <= 1)).all())
    assert bool(((beta >= -1) & (beta <= 1)).all())


def test_beta_sampling_is_seeded():
    x = torch.zeros(2, 1, 4, 4, 4)
    first, second = BetaSamplingStrategy(seed=7).sample(x), BetaSamplingStrategy(seed=7).sample(x)
    assert torch.equal(first[0], second[0])
    assert torch.equal(first[1], second[1])
    other = BetaSamplingStrategy(seed=8).sample(x)
    assert not torch.equal(first[0], other[0])


def test_beta_sampling_state_restores_the_next_draw():
    x = torch.zeros(1, 1, 4, 4)
    strategy = BetaSamplingStrategy(seed=3)
    strategy.sample(x)
    state = strategy.get_state()
    expected = strategy.sample(x)
    restored = BetaSamplingStrategy(seed=99)
    restored.set_state(state)
    actual = restored.sample(x)
    assert torch.equal(actual[0], expected[0])
    assert torch.equal(actual[1], expected[1])


def test_beta_sampling_is_centred():
    alpha, beta = BetaSamplingStrategy(seed=0).sample(torch.zeros(4000, 1, 2, 2))
    assert float(alpha.mean()) == pytest.approx(0.5, abs=0.03)
    assert float(beta.mean()) == pytest.approx(0.0, abs=0.05)


@pytest.mark.parametrize("shape", [0, -0.5])
def test_beta_sampling_rejects_non_positive_shapes(shape):
    with pytest.raises(ConfigError):
        BetaSamplingStrategy(shape=shape)


def test_fixed_sampling_follows_the_input_dtype():
    strategy = FixedSamplingStrategy(torch.full((1, 2, 1, 1), 0.5), torch.zeros(1, 1, 1, 1))
    alpha, beta = strategy.sample(torch.zeros(1, 1, 4, 4, dtype=torch.float64))
    assert alpha.dtype == torch.float64
    assert float(alpha.mean()) == 0.5
    assert float(beta.abs().max()) == 0.0


def test_neutral_sampling():
    alpha, beta = NeutralSamplingStrategy().sample(torch.zeros(2, 1, 4, 6))
    assert torch.equal(alpha, torch.ones(2, 2, 4, 6))
    assert torch.equal(beta, torch.zeros(2, 1, 4, 6))


def test_adversarial_sampling_uses_the_network():
    network = AdversarialNet(spatial_rank=2, levels=2, base_channels=4)
    strategy = AdversarialSamplingStrategy(network)
    assert strategy.get_network() is network
    alpha, beta = strategy.sample(torch.rand(1, 1, 8, 8))
    assert alpha.shape == (1, 2, 8, 8)
    assert beta.shape == (1, 1, 8, 8)


def test_only_the_adversarial_strategy_is_trainable():
    assert AdversarialSamplingStrategy.trainable
    strategies = (BaseSamplingStrategy, BetaSamplingStrategy, FixedSamplingStrategy, NeutralSamplingStrategy)
    for strategy in strategies:
        assert not strategy.trainable
