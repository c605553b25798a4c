from contextlib import contextmanager

from torch import nn


@contextmanager
def frozen(*networks: nn.Module):
    """Disable gradients of the given networks and restore the previous flags afterwards."""
    previous = [[parameter.requires_grad for parameter in network.parameters()] for network in networks]
    for network in networks:
        network.requires_grad_(False)
    try:
        yield
    finally:
        for network, flags in zip(networks, previous):
            for parameter, flag in zip(network.parameters(), flags):
                parameter.requires_grad_(flag)
