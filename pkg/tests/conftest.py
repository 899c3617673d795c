import numpy as np
import pytest
import torch

from avatargen.mini_flame import build_toy_template
from avatargen.rendering import Camera


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    np.random.seed(0)
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def template():
    return build_toy_template(0, V=162, K=4, n_beta=8, n_psi=8)


@pytest.fixture()
def camera():
    return Camera(fx=76.8, fy=76.8, cx=32.0, cy=32.0,
                  rotation=torch.zeros(3), translation=torch.zeros(3), size=(64, 64))
