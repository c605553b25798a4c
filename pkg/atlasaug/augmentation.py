"""Transform extraction through registration and atlas augmentation.

The appearance residual is kept in double precision so that adding it back to
the single-precision atlas reproduces the inverse-warped reference exactly.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Union

import torch

from atlasaug.exceptions import ShapeMismatchError
from atlasaug.networks import AdversarialNet, RegistrationNet, register
from atlasaug.sampling_strategies import AdversarialSamplingStrategy, BaseSamplingStrategy
from atlasaug.utils.typing import Perturbation
from atlasaug.volume import Atlas, Volume
from atlasaug.warping import warp_labels, warp_volume

LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransformPair:
    """Spatial transform phi ``(N, D, *spatial)`` and appearance residual psi ``(N, 1, *spatial)``."""

    spatial: torch.Tensor
    appearance: torch.Tensor

    def __post_init__(self):
        if self.spatial.shape[2:] != self.appearance.shape[2:]:
            raise ShapeMismatchError(
                f"spatial {tuple(self.spatial.shape)} and appearance {tuple(self.appearance.shape)} differ"
            )

    @property
    def appearance_mean(self) -> torch.Tensor:
        """Per-sample mean of psi over all voxels, broadcastable against psi."""
        dims = tuple(range(1, self.appearance.dim()))
        return self.appearance.mean(dim=dims, keepdim=True)


@dataclass(frozen=True)
class AugmentedSample:
    image: torch.Tensor
    labels: torch.Tensor
    warped_atlas: torch.Tensor
    spatial_used: torch.Tensor

    def __post_init__(self):
        shapes = {
            tuple(self.image.shape[2:]),
            tuple(self.labels.shape[1:]),
            tuple(self.warped_atlas.shape[2:]),
        }
        if len(shapes) != 1:
            raise ShapeMismatchError(f"augmented sample members differ in spatial shape: {sorted(shapes)}")


def extract_spatial(R: RegistrationNet, x_atlas: torch.Tensor, x_spatial: torch.Tensor) -> torch.Tensor:
    """Field phi aligning the atlas to the spatial reference."""
    x_atlas = _atlas_batch(_tensor(x_atlas), _tensor(x_spatial))
    return register(R, x_atlas, _tensor(x_spatial))


def extract_appearance(
    R: RegistrationNet, x_atlas: torch.Tensor, x_appearance: torch.Tensor
) -> torch.Tensor:
    """Residual psi between the inverse-warped appearance reference and the atlas.

    The inverse warp is the registration pass with roles swapped, aligning the
    reference to the atlas.
    """
    x_appearance = _tensor(x_appearance)
    x_atlas = _atlas_batch(_tensor(x_atlas), x_appearance)
    phi_inverse = register(R, x_appearance, x_atlas)
    reference = warp_volume(x_appearance, phi_inverse)
    return reference.double() - x_atlas.double()


def extract_transforms(
    R: RegistrationNet, atlas: Atlas, x_spatial: torch.Tensor, x_appearance: torch.Tensor
) -> TransformPair:
    return TransformPair(
        spatial=extract_spatial(R, atlas.image.data, x_spatial),
        appearance=extract_appearance(R, atlas.image.data, x_appearance),
    )


def add_appearance(x_atlas: torch.Tensor, appearance: torch.Tensor) -> torch.Tensor:
    """``x_A + psi`` evaluated in double precision and returned in the atlas dtype."""
    return (x_atlas.double() + appearance).to(x_atlas.dtype)


def vanilla_augment(atlas: Atlas, transforms: TransformPair) -> AugmentedSample:
    """``x_g = (x_A + psi) ∘ phi``, ``y_g = y_A ∘ phi`` and the warped atlas ``x_A ∘ phi``."""
    return _augment(atlas, transforms.spatial, transforms.appearance)


def adversarial_augment(
    sampler: Union[AdversarialNet, BaseSamplingStrategy],
    atlas: Atlas,
    transforms: TransformPair,
    x_g: torch.Tensor,
    perturbation: Optional[Perturbation] = None,
) -> AugmentedSample:
    """Augment with ``phi_a = alpha * phi`` and ``psi_a = psi + beta * mean(psi)``.

    ``perturbation`` overrides the sampler, which is then not evaluated.
    """
    if perturbation is None:
        perturbation = _as_strategy(sampler).sample(x_g)
    alpha, beta = perturbation
    phi_a = alpha * transforms.spatial
    psi_a = transforms.appearance + beta.double() * transforms.appearance_mean
    return _augment(atlas, phi_a, psi_a)


def _augment(atlas: Atlas, spatial: torch.Tensor, appearance: torch.Tensor) -> AugmentedSample:
    x_atlas = _atlas_batch(atlas.image.data.to(spatial.device), spatial)
    y_atlas = atlas.labels.data.to(spatial.device)
    y_atlas = y_atlas.expand(spatial.shape[0], *y_atlas.shape[1:])
    if appearance.shape[2:] != x_atlas.shape[2:]:
        raise ShapeMismatchError(
            f"appearance {tuple(appearance.shape)} does not match atlas {tuple(x_atlas.shape)}"
        )
    return AugmentedSample(
        image=warp_volume(add_appearance(x_atlas, appearance), spatial),
        labels=warp_labels(y_atlas, spatial, atlas.num_classes),
        warped_atlas=warp_volume(x_atlas, spatial),
        spatial_used=spatial,
    )


def _as_strategy(sampler: Union[AdversarialNet, BaseSamplingStrategy]) -> BaseSamplingStrategy:
    if isinstance(sampler, BaseSamplingStrategy):
        return sampler
    if isinstance(sampler, AdversarialNet):
        return AdversarialSamplingStrategy(sampler)
    raise RuntimeError("provided sampler must be an AdversarialNet or an instance of BaseSamplingStrategy.")


def _atlas_batch(x_atlas: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if x_atlas.shape[2:] != like.shape[2:]:
        raise ShapeMismatchError(f"atlas {tuple(x_atlas.shape)} and reference {tuple(like.shape)} differ")
    return x_atlas.expand(like.shape[0], *x_atlas.shape[1:])


def _tensor(value) -> torch.Tensor:
    return value.data if isinstance(value, Volume) else value
