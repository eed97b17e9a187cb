import numpy as np
import pytest
from hypothesis import settings

from mcnet.engine import LayerParams, Tensor
from mcnet.model import ModelConfig, assemble_model

settings.register_profile("mcnet", max_examples=40, deadline=None)
settings.load_profile("mcnet")


def make_params(weight, bias, dtype=np.float64):
    return LayerParams(Tensor(np.asarray(weight, dtype=dtype)), Tensor(np.asarray(bias, dtype=dtype)))


def toy_config(**kw):
    base = dict(input_size=32, dtype="float64", seed=0)
    base.update(kw)
    return ModelConfig.uniform(2, 6, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return assemble_model(toy_config())
