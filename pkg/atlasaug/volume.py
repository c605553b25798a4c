"""Immutable containers for images, label maps and displacement fields.

Each container wraps a batch-first tensor (see `atlasaug.warping`) and checks
its invariants once, at construction.
"""
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch

from atlasaug import warping
from atlasaug.exceptions import ShapeMismatchError
from atlasaug.utils.typing import Shape, ShapeLike


@dataclass(frozen=True)
class Volume:
    """Dense float grid ``(N, C, *spatial)``: images, residuals, probability channels."""

    data: torch.Tensor
    spacing: Optional[Tuple[float, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.data.dim() < 3:
            raise ShapeMismatchError(f"a volume needs (N, C, *spatial) axes, got {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            raise ShapeMismatchError(f"volume data must be floating point, got {self.data.dtype}")
        if not bool(torch.isfinite(self.data).all()):
            raise ShapeMismatchError("volume contains non-finite values")

    @classmethod
    def from_array(cls, array, spacing: Optional[Tuple[float, ...]] = None) -> "Volume":
        """Wrap a single-channel spatial array (no batch or channel axis)."""
        tensor = torch.as_tensor(np.asarray(array, dtype=np.float32))
        return cls(tensor.reshape(1, 1, *tensor.shape), spacing=spacing)

    @property
    def spatial_shape(self) -> Shape:
        return tuple(self.data.shape[2:])

    @property
    def spatial_rank(self) -> int:
        return self.data.dim() - 2

    def numpy(self) -> np.ndarray:
        """Return the first sample without batch axis, and without channel axis if single-channel."""
        array = self.data[0].detach().cpu().numpy()
        return array[0] if array.shape[0] == 1 else array

    def warped(self, displacement: "DisplacementField", interpolation: str = "linear") -> "Volume":
        _check_spatial(self.spatial_shape, displacement.spatial_shape)
        return Volume(warping.warp_volume(self.data, displacement.data, interpolation), spacing=self.spacing)


@dataclass(frozen=True)
class LabelMap:
    """Integer class grid ``(N, *spatial)`` with values in ``[0, num_classes)``."""

    data: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1:
            raise ShapeMismatchError(f"num_classes must be positive, got {self.num_classes}")
        if self.data.dim() < 2:
            raise ShapeMismatchError(f"a label map needs (N, *spatial) axes, got {tuple(self.data.shape)}")
        if self.data.is_floating_point():
            raise ShapeMismatchError(f"label data must be integral, got {self.data.dtype}")
        if self.data.numel() and (self.data.min() < 0 or self.data.max() >= self.num_classes):
            raise ShapeMismatchError(f"label values must lie in [0, {self.num_classes})")

    @classmethod
    def from_array(cls, array, num_classes: Optional[int] = None) -> "LabelMap":
        tensor = torch.as_tensor(np.asarray(array, dtype=np.int64))
        if num_classes is None:
            num_classes = int(tensor.max()) + 1 if tensor.numel() else 1
        return cls(tensor.reshape(1, *tensor.shape), num_classes)

    @property
    def spatial_shape(self) -> Shape:
        return tuple(self.data.shape[1:])

    def numpy(self) -> np.ndarray:
        return self.data[0].detach().cpu().numpy()

    def one_hot(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.nn.functional.one_hot(self.data.long(), self.num_classes).movedim(-1, 1).to(dtype)

    def warped(self, displacement: "DisplacementField") -> "LabelMap":
        _check_spatial(self.spatial_shape, displacement.spatial_shape)
        warped = warping.warp_labels(self.data, displacement.data, self.num_classes)
        return LabelMap(warped, self.num_classes)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement ``(N, D, *spatial)`` in voxels, pull-back convention."""

    data: torch.Tensor

    def __post_init__(self):
        rank = self.data.dim() - 2
        if rank < 1 or self.data.shape[1] != rank:
            raise ShapeMismatchError(
                f"a displacement field needs one component per spatial axis, got {tuple(self.data.shape)}"
            )
        if not bool(torch.isfinite(self.data).all()):
            raise ShapeMismatchError("displacement field contains non-finite values")

    @classmethod
    def zeros(
        cls, shape: ShapeLike, batch: int = 1, dtype: torch.dtype = torch.float32
    ) -> "DisplacementField":
        shape = tuple(shape)
        return cls(torch.zeros(batch, len(shape), *shape, dtype=dtype))

    @property
    def spatial_shape(self) -> Shape:
        return tuple(self.data.shape[2:])

    @property
    def spatial_rank(self) -> int:
        return self.data.dim() - 2

    def composed(self, then: "DisplacementField") -> "DisplacementField":
        """Field equivalent to warping by ``self`` first and ``then`` second."""
        return DisplacementField(warping.compose_fields(self.data, then.data))

    def inverted(self, iterations: int = warping.DEFAULT_INVERSION_ITERATIONS) -> "DisplacementField":
        return DisplacementField(warping.invert_field(self.data, iterations))


@dataclass(frozen=True)
class Atlas:
    """The single labeled example ``(x_A, y_A)``."""

    image: Volume
    labels: LabelMap

    def __post_init__(self):
        _check_spatial(self.image.spatial_shape, self.labels.spatial_shape)

    @property
    def num_classes(self) -> int:
        return self.labels.num_classes

    @property
    def spatial_shape(self) -> Shape:
        return self.image.spatial_shape


def _check_spatial(left: Shape, right: Shape):
    if tuple(left) != tuple(right):
        raise ShapeMismatchError(f"spatial shapes {tuple(left)} and {tuple(right)} differ")
