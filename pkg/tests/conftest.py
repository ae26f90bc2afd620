import numpy as np
import pytest

from prostaug import harness
from prostaug.dataio import generate_phantom_case
from prostaug.preprocess import PreprocessConfig, preprocess_case


@pytest.fixture(scope="session")
def phantom_case():
    return generate_phantom_case(seed=7, n_slices=16)


@pytest.fixture(scope="session")
def desk_config():
    return harness.desk_config(seed=0)


@pytest.fixture(scope="session")
def desk_samples(phantom_case):
    """Phantom case preprocessed to the 64x64 desk resolution."""
    vol, mask = phantom_case
    cfg = PreprocessConfig(target_size=(64, 64), clahe_tiles=(4, 4))
    return preprocess_case(vol, mask, cfg)


def random_blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Random nonempty ellipse-ish mask for metric property tests."""
    mask = np.zeros((h, w), dtype=np.uint8)
    while not mask.any():
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(1, h / 2), rng.uniform(1, w / 2)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = ((((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2) <= 1).astype(np.uint8)
    return mask
