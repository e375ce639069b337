"""Shared fixtures: deterministic RNG and test-scale network configs."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bitunet.graph import UNetConfig, scale_config

# JIT warm-up inside property bodies makes per-example deadlines meaningless.
settings.register_profile(
    "engine", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("engine")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0xBADC0DE)


def tiny_config(divisor: int = 4, extent: int = 64, **overrides) -> UNetConfig:
    """Default architecture shrunk to test scale (base-16 channels, 64x64)."""
    config = replace(scale_config(UNetConfig(), divisor), height=extent, width=extent)
    return replace(config, **overrides) if overrides else config
