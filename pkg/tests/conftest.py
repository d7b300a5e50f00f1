import numpy as np
import pytest

from pcjoint.model import CodecModel, ModelConfig
from pcjoint.voxels import VoxelCloud, canonical_order


TINY_CONFIG = ModelConfig(
    enc_widths=(6, 8, 10),
    y_channels=8,
    hyper_widths=(8, 6),
    z_channels=6,
    dec_widths=(10, 8, 6),
    cond_hidden=6,
    surrogate_hidden=6,
)


@pytest.fixture(scope="session")
def tiny_model():
    """Small random-weight model: fast, structurally complete."""
    return CodecModel(TINY_CONFIG, seed=11)


def random_cloud(rng, count, resolution):
    """Random distinct voxels with random colors, canonical order."""
    total = resolution**3
    flat = rng.choice(total, size=min(count, total), replace=False)
    coords = np.stack(
        [flat // (resolution * resolution), (flat // resolution) % resolution,
         flat % resolution],
        axis=1,
    ).astype(np.int64)
    coords = coords[canonical_order(coords)]
    attrs = rng.uniform(0.0, 1.0, size=(len(coords), 3))
    return VoxelCloud(coords, attrs, resolution)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
