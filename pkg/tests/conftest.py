import numpy as np
import pytest

from voxmae.phantom import PhantomConfig, generate_dataset
from voxmae.transformer import EncoderConfig

# Desk-tiny settings shared across test modules: 16^3 volumes, 4^3 patches,
# two encoder stages. Large enough that every attention stage sees several
# tokens, small enough that training-loop tests run in seconds.
TINY_ENCODER = EncoderConfig(embed_dims=(8, 16), blocks=(1, 1), heads=(2, 2),
                             window=(2, 2, 2), kinds=("local", "global"), mlp_ratio=2)
TINY_EXTENTS = (16, 16, 16)
TINY_PATCH = (4, 4, 4)


@pytest.fixture(scope="session")
def op_check_results():
    from voxmae.checks import op_checks
    return op_checks()


@pytest.fixture(scope="session")
def model_check_results():
    from voxmae.checks import model_checks
    return model_checks()


@pytest.fixture(scope="session")
def tiny_dataset():
    config = PhantomConfig(extents=TINY_EXTENTS, lesion_radius_range=(0.10, 0.16))
    return generate_dataset(config, (4, 4, 2, 2), seed=77)
