import itertools
import math

import numpy as np
import torch

from atlasaug.config import TrainConfig
from atlasaug.phantom import PhantomSpec
from atlasaug.volume import Atlas, LabelMap, Volume


def brute_force_warp(values: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Pull-back multilinear warp, one voxel and one corner at a time.

    ``values`` is ``(C, *spatial)`` and ``field`` is ``(D, *spatial)``.
    """
    spatial = values.shape[1:]
    out = np.zeros(values.shape, dtype=np.float64)
    for voxel in itertools.product(*(range(size) for size in spatial)):
        lower, fraction = [], []
        for axis, size in enumerate(spatial):
            position = min(max(voxel[axis] + field[(axis,) + voxel], 0.0), size - 1.0)
            base = min(math.floor(position), max(size - 2, 0))
            lower.append(base)
            fraction.append(position - base)
        for corner in itertools.product((0, 1), repeat=len(spatial)):
            weight = 1.0
            index = []
            for axis, bit in enumerate(corner):
                weight *= fraction[axis] if bit else 1 - fraction[axis]
                index.append(min(lower[axis] + bit, spatial[axis] - 1))
            out[(slice(None),) + voxel] += weight * values[(slice(None),) + tuple(index)]
    return out


def random_prediction_logits(shape, num_classes=2, seed=0, dtype=torch.float64) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn((1, num_classes) + tuple(shape), generator=generator, dtype=dtype)


def one_hot_probs(labels: torch.Tensor, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes).movedim(-1, 1).to(dtype)


def square_atlas(size: int = 8, num_classes: int = 2) -> Atlas:
    """A bright square on a dark background, one class per nested square."""
    labels = np.zeros((size, size), dtype=np.int64)
    for label in range(1, num_classes):
        margin = label * size // (2 * num_classes)
        labels[margin : size - margin, margin : size - margin] = label
    image = labels.astype(np.float32) / max(num_classes - 1, 1)
    return Atlas(image=Volume.from_array(image), labels=LabelMap.from_array(labels, num_classes))


def random_volume(shape, seed=0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((1, 1) + tuple(shape), generator=generator)


def small_spec(**changes) -> PhantomSpec:
    """16x16 slices with three classes and mild deformation."""
    values = dict(
        spatial_rank=2,
        size=16,
        num_structures=3,
        deform_amplitude=1.0,
        deform_smoothness=3.0,
        lesion_rate=0.0,
        seed=3,
    )
    values.update(changes)
    return PhantomSpec(**values)


def quiet_spec(**changes) -> PhantomSpec:
    """No deformation and no image effects: subjects equal the template."""
    quiet = dict(deform_amplitude=0.0, bias_amplitude=0.0, noise_sigma=0.0, intensity_jitter=0.0)
    return small_spec(**quiet, **changes)


def tiny_config(**changes) -> TrainConfig:
    values = dict(
        n_iterations=3,
        warmup_epochs=0,
        levels=2,
        base_channels=4,
        inversion_iters=3,
        checkpoint_every=1000,
        eval_every=1000,
        device="cpu",
    )
    values.update(changes)
    return TrainConfig(**values)


def fast_mode_config(**changes) -> TrainConfig:
    """The 2D quick CPU mode used by the long-running checks."""
    values = dict(n_iterations=2000, warmup_epochs=1, checkpoint_every=1000, eval_every=500, device="cpu")
    values.update(changes)
    return TrainConfig(**values)
