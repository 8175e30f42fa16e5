from pathlib import Path

import numpy as np
import pytest

from amsloc.ams import MetasurfaceConfig

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def opt_cfg() -> MetasurfaceConfig:
    """Optimized 60-cell metasurface shipped in configs/ (seed 0 defaults)."""
    return MetasurfaceConfig.load_json(ROOT / "configs" / "ams_optimized.json")


@pytest.fixture(scope="session")
def random_cfg() -> MetasurfaceConfig:
    return MetasurfaceConfig.random(60, np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
