"""Differentiable warping primitives.

Tensors follow a batch-first layout:

* volumes are ``(N, C, *spatial)`` floats,
* displacement fields are ``(N, D, *spatial)`` with one component per spatial
  axis, in axis order and in voxel units,
* label maps are ``(N, *spatial)`` integers.

Warps use pull-back sampling, ``out(x) = v(x + phi(x))``, with multilinear
interpolation and clamp-to-edge borders.
"""
import itertools
import logging
import math
from typing import Tuple

import torch
import torch.nn.functional as F

from atlasaug.exceptions import ShapeMismatchError
from atlasaug.utils.typing import ShapeLike

LOG = logging.getLogger(__name__)

INTERPOLATION_MODES = ("linear", "nearest")
DEFAULT_INVERSION_ITERATIONS = 10


def identity_grid(shape: ShapeLike, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """Return a ``(D, *shape)`` tensor with ``grid[:, x] == x`` for every voxel ``x``."""
    shape = tuple(int(size) for size in shape)
    if not shape or any(size < 1 for size in shape):
        raise ShapeMismatchError(f"grid sizes must all be >= 1, got {shape}")
    axes = [torch.arange(size, dtype=dtype, device=device) for size in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def warp_volume(values: torch.Tensor, field: torch.Tensor, interpolation: str = "linear") -> torch.Tensor:
    """Sample ``values`` at ``x + field(x)``.

    Differentiable with respect to both ``values`` and ``field``. A zero field
    returns ``values`` bit-for-bit.
    """
    if interpolation not in INTERPOLATION_MODES:
        raise ShapeMismatchError(
            f"interpolation must be one of {INTERPOLATION_MODES}, got '{interpolation}'"
        )
    _check_field(field)
    if values.dim() != field.dim() or values.shape[2:] != field.shape[2:]:
        raise ShapeMismatchError(
            f"volume {tuple(values.shape)} and field {tuple(field.shape)} differ in spatial shape"
        )
    grid = identity_grid(field.shape[2:], dtype=field.dtype, device=field.device)
    coords = grid.unsqueeze(0) + field
    values, coords = _broadcast_batch(values, coords)
    return _sample(values, coords, interpolation)


def warp_labels(labels: torch.Tensor, field: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Warp an integer label map by one-hot encoding, linear warping and argmax."""
    if labels.dim() + 1 != field.dim() or labels.shape[1:] != field.shape[2:]:
        raise ShapeMismatchError(
            f"labels {tuple(labels.shape)} and field {tuple(field.shape)} differ in spatial shape"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeMismatchError(f"label values must lie in [0, {num_classes})")
    one_hot = F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(field.dtype)
    with torch.no_grad():
        warped = warp_volume(one_hot, field.detach())
    return warped.argmax(dim=1)


def compose_fields(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Return the field equivalent to warping by ``first`` and then by ``second``.

    ``composed(x) = second(x) + first(x + second(x))``.
    """
    _check_field(first)
    _check_field(second)
    if first.shape[1:] != second.shape[1:]:
        raise ShapeMismatchError(f"fields {tuple(first.shape)} and {tuple(second.shape)} differ in shape")
    return second + warp_volume(first, second)


def invert_field(field: torch.Tensor, iterations: int = DEFAULT_INVERSION_ITERATIONS) -> torch.Tensor:
    """Approximate the inverse displacement by fixed-point iteration.

    ``inv_{k+1}(x) = -field(x + inv_k(x))`` starting from zero. The result is
    detached from the autograd graph.
    """
    if iterations < 1:
        raise ShapeMismatchError(f"iterations must be >= 1, got {iterations}")
    _check_field(field)
    with torch.no_grad():
        field = field.detach()
        inverse = torch.zeros_like(field)
        for _ in range(iterations):
            inverse = -warp_volume(field, inverse)
    return inverse


def field_magnitude(field: torch.Tensor) -> torch.Tensor:
    """Return the per-voxel euclidean length ``(N, *spatial)`` of a field."""
    _check_field(field)
    return field.norm(dim=1)


def _check_field(field: torch.Tensor):
    if field.dim() < 3:
        raise ShapeMismatchError(
            f"a displacement field needs (N, D, *spatial) axes, got {tuple(field.shape)}"
        )
    rank = field.dim() - 2
    if field.shape[1] != rank:
        raise ShapeMismatchError(
            f"a rank {rank} displacement field needs {rank} components per voxel, got {field.shape[1]}"
        )


def _broadcast_batch(values: torch.Tensor, coords: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    n_values, n_coords = values.shape[0], coords.shape[0]
    if n_values == n_coords:
        return values, coords
    if n_values == 1:
        return values.expand(n_coords, *values.shape[1:]), coords
    if n_coords == 1:
        return values, coords.expand(n_values, *coords.shape[1:])
    raise ShapeMismatchError(f"batch sizes {n_values} and {n_coords} cannot be broadcast")


def _gather(flat: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    n, channels = flat.shape[:2]
    spatial = index.shape[1:]
    index = index.reshape(n, 1, -1).expand(n, channels, -1)
    return torch.gather(flat, 2, index).reshape(n, channels, *spatial)


def _sample(values: torch.Tensor, coords: torch.Tensor, interpolation: str) -> torch.Tensor:
    spatial = values.shape[2:]
    rank = len(spatial)
    flat = values.reshape(values.shape[0], values.shape[1], -1)
    strides = [math.prod(spatial[axis + 1 :]) for axis in range(rank)]
    upper = [size - 1 for size in spatial]
    clamped = [coords[:, axis].clamp(0, upper[axis]) for axis in range(rank)]

    if interpolation == "nearest":
        index = sum(torch.round(clamped[axis]).long() * strides[axis] for axis in range(rank))
        return _gather(flat, index)

    lower, fraction = [], []
    for axis in range(rank):
        # The last cell is closed on the right so that the far edge keeps weight 1.
        base = torch.floor(clamped[axis]).clamp(max=max(upper[axis] - 1, 0))
        lower.append(base.long())
        fraction.append(clamped[axis] - base)

    out = None
    for corner in itertools.product((0, 1), repeat=rank):
        weight, index = None, None
        for axis, bit in enumerate(corner):
            axis_weight = fraction[axis] if bit else 1 - fraction[axis]
            axis_index = (lower[axis] + bit).clamp(max=upper[axis]) * strides[axis]
            weight = axis_weight if weight is None else weight * axis_weight
            index = axis_index if index is None else index + axis_index
        term = _gather(flat, index) * weight.unsqueeze(1)
        out = term if out is None else out + term
    return out
