from __future__ import annotations

import numpy as np
import pytest

from lobeguide.voxelcore import Mask, Volume


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_volume(dims=(8, 8, 8), fill=-800.0, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.full(dims, fill, dtype=np.float32), spacing=spacing)


def random_mask(rng: np.random.Generator, dims=(8, 8, 8), p=0.3) -> Mask:
    return Mask((rng.random(dims) < p).astype(np.uint8))
