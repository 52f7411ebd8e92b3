import functools

import pytest
import torch
from hypothesis import HealthCheck, settings

from biprompt.encoders import ConvEncoder, HashTextEncoder, PlantedBiasEncoder, encode_class_prompts
from biprompt.evalbench import BiasSpec, generate_dataset, prototypes

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

CLASS_NAMES = ("landbird", "waterbird")


@functools.lru_cache(maxsize=None)
def planted_setup(seed: int = 0, n: int = 200):
    """Prompts, planted-bias encoder and a small benchmark with the default settings."""
    spec = BiasSpec(seed=seed)
    prompts = encode_class_prompts(HashTextEncoder(embed_dim=32, seed=0), CLASS_NAMES)
    objs, bgs = prototypes(spec)
    enc = PlantedBiasEncoder(prompts, objs, bgs)
    return spec, prompts, enc, generate_dataset(spec, n)


@pytest.fixture
def planted():
    return planted_setup()


@pytest.fixture
def conv():
    return ConvEncoder(embed_dim=16, seed=3)


def random_pixels(seed: int, size: int = 16) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=g, dtype=torch.float64)
