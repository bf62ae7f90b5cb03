import numpy as np
import pytest
import torch

from vdsde.model import LatentVDSDE, ModelConfig


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(d_x=2, d_z=3, hidden=4, embed=4, width=8, gap_width=4, n_substeps=2, lam=5.0)
    cfg.update(kw)
    return LatentVDSDE(ModelConfig(**cfg))


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def batch():
    return torch.from_numpy(np.random.default_rng(0).normal(size=(3, 12, 2)))
