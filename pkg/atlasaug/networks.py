"""Encoder-decoder networks for registration (R), adversarial sampling (G) and
segmentation (S).

All three share a U-Net trunk: per level two 3x3 convolutions with optional
instance normalization and leaky ReLU, max pooling between encoder levels,
nearest upsampling and skip concatenation in the decoder.
"""
import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from atlasaug.exceptions import ConfigError, ShapeMismatchError
from atlasaug.losses import Prediction
from atlasaug.utils.typing import Perturbation, ShapeLike
from atlasaug.volume import Volume

LOG = logging.getLogger(__name__)

LEAKY_RELU_SLOPE = 0.2
NORMALIZATIONS = ("instance", "none")

_CONVOLUTIONS = {1: nn.Conv1d, 2: nn.Conv2d, 3: nn.Conv3d}
_INSTANCE_NORMS = {1: nn.InstanceNorm1d, 2: nn.InstanceNorm2d, 3: nn.InstanceNorm3d}
_MAX_POOLS = {1: F.max_pool1d, 2: F.max_pool2d, 3: F.max_pool3d}


@dataclass(frozen=True)
class EncoderDecoderConfig:
    spatial_rank: int = 3
    levels: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    normalization: str = "instance"

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be positive")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got '{self.normalization}'")

    @property
    def divisor(self) -> int:
        """Every input spatial size must be a multiple of this."""
        return 2 ** (self.levels - 1)

    @property
    def min_size(self) -> int:
        """The coarsest level keeps at least two voxels per axis."""
        return 2 * self.divisor

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def replace(self, **changes) -> "EncoderDecoderConfig":
        return dataclasses.replace(self, **changes)

    def check_input(self, spatial_shape: ShapeLike):
        spatial_shape = tuple(spatial_shape)
        if len(spatial_shape) != self.spatial_rank:
            raise ShapeMismatchError(
                f"expected a rank {self.spatial_rank} input, got spatial shape {spatial_shape}"
            )
        if any(size % self.divisor for size in spatial_shape):
            raise ShapeMismatchError(
                f"spatial sizes {spatial_shape} must be divisible by {self.divisor} for {self.levels} levels"
            )
        if any(size < self.min_size for size in spatial_shape):
            raise ShapeMismatchError(
                f"spatial sizes {spatial_shape} must be at least {self.min_size} for {self.levels} levels"
            )


class ConvBlock(nn.Sequential):
    """Two (convolution, normalization, leaky ReLU) stages."""

    def __init__(self, rank: int, in_channels: int, out_channels: int, normalization: str):
        layers = []
        for channels in (in_channels, out_channels):
            layers.append(_CONVOLUTIONS[rank](channels, out_channels, kernel_size=3, padding=1))
            if normalization == "instance":
                layers.append(_INSTANCE_NORMS[rank](out_channels))
            layers.append(nn.LeakyReLU(LEAKY_RELU_SLOPE))
        super().__init__(*layers)


class EncoderDecoder(nn.Module):
    """U-Net trunk returning ``base_channels`` features at input resolution."""

    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.config = config
        rank = config.spatial_rank
        self.encoders = nn.ModuleList()
        in_channels = config.in_channels
        for level in range(config.levels):
            self.encoders.append(ConvBlock(rank, in_channels, config.channels(level), config.normalization))
            in_channels = config.channels(level)
        self.decoders = nn.ModuleList(
            ConvBlock(
                rank,
                config.channels(level + 1) + config.channels(level),
                config.channels(level),
                config.normalization,
            )
            for level in reversed(range(config.levels - 1))
        )

    @property
    def out_features(self) -> int:
        return self.config.base_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.config.check_input(x.shape[2:])
        pool = _MAX_POOLS[self.config.spatial_rank]
        skips = []
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                x = pool(x, 2)
            x = encoder(x)
            skips.append(x)
        x = skips.pop()
        for decoder in self.decoders:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = decoder(torch.cat([x, skips.pop()], dim=1))
        return x


def _head(config: EncoderDecoderConfig, out_channels: int) -> nn.Module:
    return _CONVOLUTIONS[config.spatial_rank](config.base_channels, out_channels, kernel_size=3, padding=1)


class RegistrationNet(nn.Module):
    """R: (moving, fixed) -> displacement field aligning moving to fixed.

    The output head starts at zero so that an untrained R returns the identity.
    """

    def __init__(
        self, spatial_rank: int = 3, levels: int = 4, base_channels: int = 16, normalization="instance"
    ):
        super().__init__()
        self.config = EncoderDecoderConfig(
            spatial_rank,
            levels,
            base_channels,
            in_channels=2,
            out_channels=spatial_rank,
            normalization=normalization,
        )
        self.trunk = EncoderDecoder(self.config)
        self.head = _head(self.config, spatial_rank)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        if moving.shape != fixed.shape:
            raise ShapeMismatchError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ")
        return self.head(self.trunk(torch.cat([moving, fixed], dim=1)))


class AdversarialNet(nn.Module):
    """G: x_g -> (alpha, beta), alpha in (0, 1) per component and beta in (-1, 1)."""

    def __init__(
        self, spatial_rank: int = 3, levels: int = 4, base_channels: int = 16, normalization="instance"
    ):
        super().__init__()
        self.config = EncoderDecoderConfig(
            spatial_rank,
            levels,
            base_channels,
            in_channels=1,
            out_channels=spatial_rank,
            normalization=normalization,
        )
        self.trunk = EncoderDecoder(self.config)
        self.alpha_head = _head(self.config, spatial_rank)
        self.beta_head = _head(self.config, 1)

    def forward(self, x: torch.Tensor) -> Perturbation:
        features = self.trunk(x)
        return torch.sigmoid(self.alpha_head(features)), torch.tanh(self.beta_head(features))


class SegmentationNet(nn.Module):
    """S: image -> class logits."""

    def __init__(
        self,
        num_classes: int,
        spatial_rank: int = 3,
        levels: int = 4,
        base_channels: int = 16,
        normalization: str = "instance",
    ):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.config = EncoderDecoderConfig(
            spatial_rank,
            levels,
            base_channels,
            in_channels=1,
            out_channels=num_classes,
            normalization=normalization,
        )
        self.trunk = EncoderDecoder(self.config)
        self.head = _head(self.config, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))


@dataclass
class NetworkSet:
    registration: RegistrationNet
    adversarial: AdversarialNet
    segmentation: SegmentationNet

    def items(self):
        return (
            ("registration", self.registration),
            ("adversarial", self.adversarial),
            ("segmentation", self.segmentation),
        )

    def to(self, device) -> "NetworkSet":
        for _, network in self.items():
            network.to(device)
        return self


def build_networks(
    num_classes: int,
    spatial_rank: int = 3,
    levels: int = 4,
    base_channels: int = 16,
    seed: int = 0,
    normalization: str = "instance",
) -> NetworkSet:
    """Build R, G and S with parameters that are a pure function of the arguments."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        networks = NetworkSet(
            registration=RegistrationNet(spatial_rank, levels, base_channels, normalization),
            adversarial=AdversarialNet(spatial_rank, levels, base_channels, normalization),
            segmentation=SegmentationNet(num_classes, spatial_rank, levels, base_channels, normalization),
        )
    LOG.debug(
        "built networks rank=%d levels=%d base=%d classes=%d seed=%d",
        spatial_rank,
        levels,
        base_channels,
        num_classes,
        seed,
    )
    return networks


def count_parameters(network: nn.Module) -> int:
    return sum(parameter.numel() for parameter in network.parameters())


def register(
    R: RegistrationNet, moving: Union[Volume, torch.Tensor], fixed: Union[Volume, torch.Tensor]
) -> torch.Tensor:
    """Return the field aligning ``moving`` to ``fixed``: ``moving ∘ R(moving, fixed) ≈ fixed``."""
    return R(_tensor(moving), _tensor(fixed))


def sample_perturbation(G: AdversarialNet, x_g: Union[Volume, torch.Tensor]) -> Perturbation:
    return G(_tensor(x_g))


def segment(S: SegmentationNet, x: Union[Volume, torch.Tensor]) -> Prediction:
    return Prediction.from_logits(S(_tensor(x)))


def parameter_checksum(network: nn.Module) -> str:
    """SHA-256 over the raw parameter bytes, used to assert that frozen networks did not move."""
    digest = hashlib.sha256()
    with torch.no_grad():
        for parameter in network.parameters():
            digest.update(parameter.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _tensor(value) -> torch.Tensor:
    return value.data if isinstance(value, Volume) else value
