import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """A configuration small enough to run all three stages in seconds."""
    from diffcode.pipeline import RunConfig

    return RunConfig().replace(**{
        "model.blocks_per_level": [1, 1], "model.channels_per_level": [4, 8], "model.latent_downsample": 2,
        "data.size": 16, "data.n_train": 4, "data.n_val": 1, "data.n_test": 2,
        "codebook.size": 8, "codebook.dim": 4, "codebook.depth": 2, "codebook.warmup_images": 4,
        "diffusion.T": 3, "diffusion.hidden": 8, "routing.classifier_width": 4,
        "stage1.iters": 3, "stage2.iters": 3, "stage3.iters": 3, "stage1.batch": 2, "stage2.batch": 4,
        "stage3.batch": 4,
    })
