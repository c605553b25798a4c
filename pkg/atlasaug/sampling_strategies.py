import json
from typing import Optional

import numpy as np
import torch

from atlasaug.exceptions import ConfigError
from atlasaug.networks import AdversarialNet, sample_perturbation
from atlasaug.utils.typing import Perturbation


class BaseSamplingStrategy:
    """Produce the sampling layers (alpha, beta) that perturb a transform pair.

    alpha scales the spatial transform and lies in (0, 1); beta scales the
    mean appearance residual and lies in (-1, 1).
    """

    # Whether the strategy owns parameters that the augmenter phase optimizes.
    trainable = False

    def sample(self, x_g: torch.Tensor) -> Perturbation:  # pragma: no cover
        raise NotImplementedError


class AdversarialSamplingStrategy(BaseSamplingStrategy):
    """Sampling layers predicted by the adversarial network from the augmented image."""

    trainable = True

    def __init__(self, network: AdversarialNet):
        self._network = network

    def get_network(self) -> AdversarialNet:
        return self._network

    def sample(self, x_g: torch.Tensor) -> Perturbation:
        return sample_perturbation(self._network, x_g)


class BetaSamplingStrategy(BaseSamplingStrategy):
    """Predefined sampling: one Beta(shape, shape) draw per sample and component.

    The draws are rescaled to the ranges of the adversarial network's outputs
    and broadcast over the grid.
    """

    def __init__(self, shape: float = 0.5, seed: int = 0, generator: Optional[np.random.Generator] = None):
        if shape <= 0:
            raise ConfigError(f"beta shape must be positive, got {shape}")
        self._shape = shape
        self._generator = generator if generator is not None else np.random.default_rng(seed)

    def sample(self, x_g: torch.Tensor) -> Perturbation:
        batch, rank = x_g.shape[0], x_g.dim() - 2
        singleton = (1,) * rank
        alpha = self._generator.beta(self._shape, self._shape, size=(batch, rank) + singleton)
        beta = 2 * self._generator.beta(self._shape, self._shape, size=(batch, 1) + singleton) - 1
        return (
            torch.as_tensor(alpha, dtype=x_g.dtype, device=x_g.device),
            torch.as_tensor(beta, dtype=x_g.dtype, device=x_g.device),
        )

    def get_state(self) -> str:
        """Generator state as a JSON string, suitable for a checkpoint."""
        return json.dumps(self._generator.bit_generator.state)

    def set_state(self, state: str):
        self._generator.bit_generator.state = json.loads(state)


class FixedSamplingStrategy(BaseSamplingStrategy):
    """Inject given sampling layers regardless of the input."""

    def __init__(self, alpha: torch.Tensor, beta: torch.Tensor):
        self._alpha = alpha
        self._beta = beta

    def sample(self, x_g: torch.Tensor) -> Perturbation:
        return self._alpha.to(x_g), self._beta.to(x_g)


class NeutralSamplingStrategy(BaseSamplingStrategy):
    """alpha = 1 and beta = 0 everywhere: reproduces the vanilla sample."""

    def sample(self, x_g: torch.Tensor) -> Perturbation:
        batch, spatial = x_g.shape[0], x_g.shape[2:]
        alpha = torch.ones(batch, len(spatial), *spatial, dtype=x_g.dtype, device=x_g.device)
        beta = torch.zeros(batch, 1, *spatial, dtype=x_g.dtype, device=x_g.device)
        return alpha, beta
