import numpy as np
import pytest

from raki_noise import phantom, raki


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    """32x32, 4 coils, whitened."""
    return phantom.generate(phantom.PhantomSpec(grid=(32, 32), ncoils=4)).prewhitened()


@pytest.fixture(scope="session")
def tiny_net():
    """8x8-compatible CLReLU net with 2 coils, channels [3, 2], R=2."""
    spec = raki.NetworkSpec((3, 2), ((3, 2), (1, 1), (3, 2)))
    return raki.init_network(2, 2, spec, seed=7)


@pytest.fixture(scope="session")
def tiny_comb():
    rng = np.random.default_rng(99)
    from raki_noise.tensor import comb_kspace

    return comb_kspace(crandn(rng, 8, 8, 2), 2, 0)
