import numpy as np
import pytest

from lgrnet import kernels


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
