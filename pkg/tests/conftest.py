import numpy as np
import pytest

from avatarforge import mannequin


@pytest.fixture(scope="session")
def body_template():
    return mannequin.make_mannequin(seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)
