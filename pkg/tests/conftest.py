import hypothesis
import numpy as np
import pytest

from src.dataset_spec import cmnist_plus
from src.sampler import make_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.register_profile("default_lab", max_examples=25, deadline=None)
hypothesis.settings.load_profile("default_lab")


@pytest.fixture
def plus_09():
    return cmnist_plus(0.9)


@pytest.fixture
def small_plus_dataset():
    """CMNIST+(0.9) 小样本，训练类测试共用"""
    return make_dataset(cmnist_plus(0.9), n_per_env=400, seed=3)
