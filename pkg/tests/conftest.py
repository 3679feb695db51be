import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from coordgan import ArchConfig, Generator, GeneratorConfig


def random_params(generator: Generator, batch: int = 1, seed: int = 0):
    """INRParams with nonzero factors (the fresh head would emit zeros)."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, generator.config.z_dim, generator=gen)
    w = generator.map_latent(z)
    params = generator.generate_params(w)
    # add spread so modulation is exercised away from sigma(0)
    return params.map(
        lambda t: (t + torch.randn(t.shape, generator=gen) * 0.5).detach()
    )


@pytest.fixture
def tiny_arch_cfg():
    return ArchConfig(block_resolutions=(4, 8), widths=(6, 5), fourier_n_f=3, rank=2)


@pytest.fixture
def tiny_generator(tiny_arch_cfg):
    return Generator(
        GeneratorConfig(z_dim=8, hidden_dim=12, num_layers=2),
        tiny_arch_cfg,
        init_seed=7,
    )
