"""Shared pytest fixtures for FIF Flow tests."""

import os
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from fif_flow.data.datasets import gen_gaussian_mixture, gen_sinusoid
from fif_flow.model import nets


@pytest.fixture
def rng():
    """Seeded numpy Generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_pair():
    """Smooth MLP pair, D=3, d=2, one hidden layer."""
    return nets.build(nets.ArchSpec(D=3, d=2, hidden=(8,), activation="tanh", seed=7))


@pytest.fixture
def tiny_pair():
    """Smallest smooth pair used in finite-difference checks, D=2, d=1."""
    return nets.build(nets.ArchSpec(D=2, d=1, hidden=(4,), activation="tanh", seed=3))


@pytest.fixture
def embedding_pair():
    """Linear pair with encoder A = [1, 0] and decoder [1, 0]ᵀ."""
    return nets.linear_pair(np.array([[1.0, 0.0]]))


@pytest.fixture
def orthonormal_pair():
    """Linear pair whose encoder rows are orthonormal (d=2, D=4)."""
    Q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((4, 2)))
    return nets.linear_pair(Q.T)


@pytest.fixture
def sinusoid_dataset():
    """Small noisy sinusoid with aux arrays."""
    return gen_sinusoid(400, noise_std=0.1, seed=0)


@pytest.fixture
def mixture_dataset():
    """Small two-component mixture."""
    return gen_gaussian_mixture(400, seed=0)


@pytest.fixture
def quiet_env():
    """Silence trainer progress lines."""
    with patch.dict(os.environ, {"FIF_VERBOSE": "0"}):
        yield


@pytest.fixture
def write_ini(tmp_path):
    """Write INI text to a temp file and return its path."""

    def _write(text: str, name: str = "experiment.ini") -> Path:
        path = tmp_path / name
        path.write_text(text)
        return path

    return _write


@pytest.fixture
def sinusoid_ini(write_ini, tmp_path):
    """A fast sinusoid training config (tiny MLP, two epochs)."""
    return write_ini(f"""
[experiment]
kind = train
name = sinusoid_smoke
loss = fif

[data]
kind = sinusoid
n = 200
noise_std = 0.1

[arch]
d = 1
hidden = 8
activation = tanh

[loss]
beta = 10.0
k = 1

[optim]
lr = 0.005
epochs = 2
batch_size = 64

[run]
seed = 3
out_dir = {tmp_path / 'run'}
eval_samples = 200
""")
