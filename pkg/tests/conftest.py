import os

import hypothesis
import numpy as np
import pytest

from core.models import Image
from core.regnet import NetConfig, NetParams, init_params

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Two-level, four-channel 2D predictor used by the fast tests"""
    return NetConfig(ndim=2, encoder_channels=(4, 4), decoder_channels=(4, 4))


def smooth_image(rng, dims, sigma=1.5):
    """Band-limited random image in [0, 1]"""
    from scipy import ndimage

    data = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode='reflect')
    data = (data - data.min()) / (data.max() - data.min())
    return Image(data)


def randomized_params(config, seed, scale=0.3):
    """Initialized params with a non-zero final layer"""
    params = init_params(config, seed)
    generator = np.random.default_rng(seed + 1)
    tensors = dict(params.tensors)
    for name in ("flow.weight", "flow.bias"):
        tensors[name] = (scale * generator.standard_normal(tensors[name].shape)).astype(config.dtype)
    for name in tensors:
        if name.endswith(".bias") and not name.startswith("flow"):
            tensors[name] = (0.1 * generator.standard_normal(tensors[name].shape)).astype(config.dtype)
    return NetParams(config, tensors)
