import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from atlasaug.exceptions import ShapeMismatchError
from atlasaug.warping import (
    compose_fields,
    field_magnitude,
    identity_grid,
    invert_field,
    warp_labels,
    warp_volume,
)
from tests.helpers import brute_force_warp


def smooth_field(shape, amplitude, sigma=3.0, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    components = np.stack([gaussian_filter(rng.standard_normal(shape), sigma) for _ in shape])
    components *= amplitude / np.sqrt((components**2).sum(axis=0)).max()
    return torch.from_numpy(components).unsqueeze(0).to(dtype)


def test_identity_grid():
    grid = identity_grid((2, 3))
    assert grid.shape == (2, 2, 3)
    assert grid[0].tolist() == [[0, 0, 0], [1, 1, 1]]
    assert grid[1].tolist() == [[0, 1, 2], [0, 1, 2]]


@pytest.mark.parametrize("shape", [(), (0, 3)])
def test_identity_grid_rejects_empty_shapes(shape):
    with pytest.raises(ShapeMismatchError):
        identity_grid(shape)


@pytest.mark.parametrize("interpolation", ["linear", "nearest"])
def test_zero_field_returns_values_bit_for_bit(interpolation):
    values = torch.randn(2, 3, 5, 4, 6, generator=torch.Generator().manual_seed(0))
    field = torch.zeros(2, 3, 5, 4, 6)
    assert torch.equal(warp_volume(values, field, interpolation), values)


def test_linear_warp_matches_brute_force():
    generator = torch.Generator().manual_seed(1)
    for _ in range(100):
        values = torch.rand(2, 5, 5, 5, generator=generator, dtype=torch.float64)
        # Includes displacements that leave the grid and get clamped.
        field = 6 * torch.rand(3, 5, 5, 5, generator=generator, dtype=torch.float64) - 3
        result = warp_volume(values.unsqueeze(0), field.unsqueeze(0))[0]
        expected = brute_force_warp(values.numpy(), field.numpy())
        np.testing.assert_allclose(result.numpy(), expected, rtol=1e-6, atol=1e-12)


def test_constant_shift_reads_the_next_voxel_and_clamps_at_the_edge():
    values = torch.arange(5, dtype=torch.float32).reshape(1, 1, 5, 1)
    field = torch.zeros(1, 2, 5, 1)
    field[:, 0] = 1
    assert warp_volume(values, field).flatten().tolist() == [1, 2, 3, 4, 4]


def test_half_shift_interpolates_linearly():
    values = torch.tensor([0.0, 2.0, 4.0]).reshape(1, 1, 3)
    field = torch.full((1, 1, 3), 0.5)
    assert warp_volume(values, field).flatten().tolist() == [1.0, 3.0, 4.0]


def test_nearest_interpolation_rounds():
    values = torch.tensor([0.0, 2.0, 4.0]).reshape(1, 1, 3)
    field = torch.full((1, 1, 3), 0.7)
    assert warp_volume(values, field, "nearest").flatten().tolist() == [2.0, 4.0, 4.0]


def test_batch_of_one_broadcasts():
    values = torch.rand(1, 1, 4, 4)
    field = torch.zeros(3, 2, 4, 4)
    field[1] = 0.5
    result = warp_volume(values, field)
    assert result.shape == (3, 1, 4, 4)
    assert torch.equal(result[0], values[0])
    assert torch.equal(result[2], values[0])


def test_warp_is_differentiable_in_values_and_field():
    generator = torch.Generator().manual_seed(2)
    values = torch.rand(1, 2, 3, 3, 3, generator=generator, dtype=torch.float64, requires_grad=True)
    # Fractional offsets away from cell boundaries, where the warp is smooth.
    field = 0.1 + 0.3 * torch.rand(1, 3, 3, 3, 3, generator=generator, dtype=torch.float64)
    field.requires_grad_(True)
    assert torch.autograd.gradcheck(warp_volume, (values, field), eps=1e-6, atol=1e-6)


def test_warp_labels_follows_the_volume_warp():
    labels = torch.tensor([[0, 1, 2, 2, 1]]).reshape(1, 5, 1)
    field = torch.zeros(1, 2, 5, 1)
    field[:, 0] = 1
    warped = warp_labels(labels, field, num_classes=3)
    assert warped.dtype == torch.int64
    assert warped.flatten().tolist() == [1, 2, 2, 1, 1]


def test_warp_labels_stays_in_range_and_detached():
    labels = torch.randint(0, 4, (1, 6, 6), generator=torch.Generator().manual_seed(3))
    field = smooth_field((6, 6), amplitude=1.5, sigma=1.0, dtype=torch.float32).requires_grad_(True)
    warped = warp_labels(labels, field, num_classes=4)
    assert warped.shape == labels.shape
    assert int(warped.min()) >= 0 and int(warped.max()) < 4
    assert not warped.requires_grad


def test_warp_labels_rejects_out_of_range_labels():
    with pytest.raises(ShapeMismatchError):
        warp_labels(torch.full((1, 3, 3), 5), torch.zeros(1, 2, 3, 3), num_classes=3)


def test_compose_with_zero_field_is_neutral():
    field = smooth_field((8, 8), amplitude=2.0)
    zero = torch.zeros_like(field)
    assert torch.equal(compose_fields(field, zero), field)
    assert torch.allclose(compose_fields(zero, field), field)


def test_compose_constant_shifts_adds_them_in_the_interior():
    first = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    second = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    first[:, 0] = 1.0
    second[:, 1] = -2.0
    composed = compose_fields(first, second)
    assert torch.allclose(composed[:, 0], torch.ones(1, 8, 8, dtype=torch.float64))
    assert torch.allclose(composed[:, 1], torch.full((1, 8, 8), -2.0, dtype=torch.float64))


def test_composed_warp_equals_sequential_warps_in_the_interior():
    first = smooth_field((12, 12), amplitude=1.0, seed=4)
    second = smooth_field((12, 12), amplitude=1.0, seed=5)
    # Interpolation reproduces a linear image exactly.
    grid = identity_grid((12, 12), dtype=torch.float64)
    image = (0.1 * grid[0] + 0.05 * grid[1]).reshape(1, 1, 12, 12)
    sequential = warp_volume(warp_volume(image, first), second)
    composed = warp_volume(image, compose_fields(first, second))
    interior = (slice(None), slice(None), slice(3, -3), slice(3, -3))
    assert torch.allclose(sequential[interior], composed[interior], atol=1e-6)


def test_invert_smooth_field():
    field = smooth_field((16, 16, 16), amplitude=2.0, sigma=3.0, seed=6)
    inverse = invert_field(field, iterations=20)
    residual = compose_fields(field, inverse)
    interior = (slice(None), slice(None)) + (slice(3, -3),) * 3
    assert field_magnitude(residual[interior]).max() <= 0.1
    assert not inverse.requires_grad


def test_invert_zero_field_is_zero():
    assert torch.equal(invert_field(torch.zeros(1, 2, 4, 4)), torch.zeros(1, 2, 4, 4))


def test_field_magnitude():
    field = torch.zeros(1, 2, 2, 2)
    field[:, 0] = 3
    field[:, 1] = 4
    assert torch.equal(field_magnitude(field), torch.full((1, 2, 2), 5.0))


@pytest.mark.parametrize(
    "values,field",
    [
        (torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 4, 4)),
        (torch.zeros(1, 1, 4, 4), torch.zeros(1, 2, 4, 5)),
        (torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 2, 4, 4)),
        (torch.zeros(2, 1, 4, 4), torch.zeros(3, 2, 4, 4)),
    ],
)
def test_warp_rejects_mismatched_shapes(values, field):
    with pytest.raises(ShapeMismatchError):
        warp_volume(values, field)


def test_warp_rejects_unknown_interpolation():
    with pytest.raises(ShapeMismatchError) as exc_info:
        warp_volume(torch.zeros(1, 1, 2, 2), torch.zeros(1, 2, 2, 2), "cubic")
    assert "cubic" in str(exc_info.value)


def test_invert_requires_an_iteration():
    with pytest.raises(ShapeMismatchError):
        invert_field(torch.zeros(1, 2, 2, 2), iterations=0)


def test_compose_rejects_different_shapes():
    with pytest.raises(ShapeMismatchError):
        compose_fields(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5))
