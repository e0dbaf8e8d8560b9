import numpy as np
import pytest
import torch

from config import build_run_config


@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def toy_config():
    """Factory for a small model configuration (width 4, short chain) with dotted overrides"""
    def make(overrides=None):
        cfg = build_run_config({
            'diffusion': {'steps': 10},
            'model': {'width': 4},
            'train': {'epochs': 1, 'batch_size': 16},
            'metrics': {'trials': 2, 'iterations': 10, 'encoder_steps': 5},
        })
        return cfg.with_overrides(overrides) if overrides else cfg
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
