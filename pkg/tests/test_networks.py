import pytest
import torch

from atlasaug.checkpoints import load_checkpoint, save_checkpoint
from atlasaug.exceptions import CheckpointError, ConfigError, ShapeMismatchError
from atlasaug.networks import (
    AdversarialNet,
    EncoderDecoderConfig,
    NetworkSet,
    RegistrationNet,
    SegmentationNet,
    build_networks,
    count_parameters,
    parameter_checksum,
    register,
    sample_perturbation,
    segment,
)
from atlasaug.volume import Volume


def tiny_networks(seed=0, num_classes=2):
    return build_networks(num_classes, spatial_rank=2, levels=2, base_channels=4, seed=seed)


def test_parameter_counts():
    assert count_parameters(SegmentationNet(2, spatial_rank=2, levels=2, base_channels=4)) == 1726
    assert count_parameters(RegistrationNet(spatial_rank=2, levels=2, base_channels=4)) == 1762


def test_untrained_registration_returns_the_identity():
    R = RegistrationNet(spatial_rank=2, levels=2, base_channels=4)
    field = register(R, torch.rand(2, 1, 8, 8), Volume(torch.rand(2, 1, 8, 8)))
    assert field.shape == (2, 2, 8, 8)
    assert torch.equal(field, torch.zeros_like(field))


def test_adversarial_outputs_lie_in_their_ranges():
    G = AdversarialNet(spatial_rank=3, levels=2, base_channels=4)
    alpha, beta = sample_perturbation(G, torch.randn(2, 1, 4, 4, 4) * 10)
    assert alpha.shape == (2, 3, 4, 4, 4)
    assert beta.shape == (2, 1, 4, 4, 4)
    assert bool(((alpha >= 0) & (alpha <= 1)).all())
    assert bool(((beta >= -1) & (beta <= 1)).all())


def test_segmentation_returns_a_distribution():
    S = SegmentationNet(4, spatial_rank=2, levels=3, base_channels=4)
    prediction = segment(S, torch.rand(1, 1, 8, 8))
    assert prediction.probs.shape == (1, 4, 8, 8)
    assert prediction.is_valid()


def test_input_sizes_must_suit_the_depth():
    S = SegmentationNet(2, spatial_rank=2, levels=3, base_channels=4)
    with pytest.raises(ShapeMismatchError) as exc_info:
        S(torch.rand(1, 1, 6, 8))
    assert "divisible by 4" in str(exc_info.value)


def test_input_rank_must_match():
    S = SegmentationNet(2, spatial_rank=3, levels=2, base_channels=4)
    with pytest.raises(ShapeMismatchError):
        S(torch.rand(1, 1, 8, 8))


def test_registration_rejects_mismatched_inputs():
    R = RegistrationNet(spatial_rank=2, levels=2, base_channels=4)
    with pytest.raises(ShapeMismatchError):
        R(torch.rand(1, 1, 8, 8), torch.rand(2, 1, 8, 8))


@pytest.mark.parametrize(
    "changes",
    [
        {"spatial_rank": 1},
        {"spatial_rank": 4},
        {"levels": 1},
        {"base_channels": 2},
        {"out_channels": 0},
        {"normalization": "batch"},
    ],
)
def test_encoder_decoder_config_validation(changes):
    with pytest.raises(ConfigError):
        EncoderDecoderConfig(**changes)


def test_encoder_decoder_divisor():
    assert EncoderDecoderConfig(levels=4).divisor == 8


def test_segmentation_needs_two_classes():
    with pytest.raises(ConfigError):
        SegmentationNet(1)


def test_build_networks_is_a_pure_function_of_its_arguments():
    first, second, other = tiny_networks(seed=1), tiny_networks(seed=1), tiny_networks(seed=2)
    for name in ("registration", "adversarial", "segmentation"):
        assert parameter_checksum(getattr(first, name)) == parameter_checksum(getattr(second, name))
    assert parameter_checksum(first.segmentation) != parameter_checksum(other.segmentation)


def test_build_networks_leaves_the_global_generator_alone():
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    tiny_networks()
    assert torch.equal(torch.rand(3), expected)


def test_network_set_items():
    networks = tiny_networks()
    assert isinstance(networks, NetworkSet)
    assert [name for name, _ in networks.items()] == ["registration", "adversarial", "segmentation"]


def test_forward_does_not_change_the_checksum():
    S = tiny_networks().segmentation
    before = parameter_checksum(S)
    S(torch.rand(1, 1, 8, 8))
    assert parameter_checksum(S) == before


def test_checkpoint_round_trip(tmp_path):
    networks = tiny_networks(seed=3)
    path = tmp_path / "nested" / "networks.pt"
    save_checkpoint({"networks": {name: network.state_dict() for name, network in networks.items()}}, path)
    assert path.exists()
    assert not path.with_name("networks.pt.partial").exists()

    restored = tiny_networks(seed=4)
    payload = load_checkpoint(path)
    for name, network in restored.items():
        network.load_state_dict(payload["networks"][name])
    image = torch.rand(1, 1, 8, 8)
    assert torch.equal(networks.segmentation(image), restored.segmentation(image))
    assert parameter_checksum(networks.adversarial) == parameter_checksum(restored.adversarial)


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(tmp_path / "missing.pt")
    assert "missing.pt" in str(exc_info.value)


def test_load_invalid_checkpoint(tmp_path):
    path = tmp_path / "garbage.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_load_checkpoint_without_networks(tmp_path):
    path = tmp_path / "empty.pt"
    save_checkpoint({"iteration": 3}, path)
    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)
    assert "network parameters" in str(exc_info.value)


@pytest.mark.parametrize("size,accepted", [(8, False), (16, True), (24, True)])
def test_inputs_keep_two_voxels_at_the_coarsest_level(size, accepted):
    config = EncoderDecoderConfig(spatial_rank=2, levels=4)
    assert config.min_size == 16
    if accepted:
        config.check_input((size, size))
    else:
        with pytest.raises(ShapeMismatchError) as exc_info:
            config.check_input((size, 16))
        assert "at least 16" in str(exc_info.value)
