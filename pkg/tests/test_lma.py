import logging

import pytest
import torch

from config import Config, ShapeError
from lma import LearnableMovingAverage, build_lma, moving_average


def randomize(module, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator))


def test_moving_average_values():
    x = torch.arange(6.0).reshape(1, 6, 1)
    out = moving_average(x, 3)[0, :, 0]
    assert torch.allclose(out, torch.tensor([0.0, 1 / 3, 1.0, 2.0, 3.0, 4.0]))
    assert torch.equal(moving_average(x, 1), x)


def test_moving_average_causal_and_constant():
    x = torch.randn(2, 12, 3)
    changed = x.clone()
    changed[:, 8:] += 5.0
    assert torch.allclose(moving_average(x, 4)[:, :8], moving_average(changed, 4)[:, :8])
    constant = torch.full((1, 10, 2), 3.5)
    assert torch.allclose(moving_average(constant, 6), constant)


def test_roundtrip_random_parameters():
    lma = LearnableMovingAverage(n_channels=8, length=24)
    randomize(lma)
    x = torch.randn(1000, 24, 8, generator=torch.Generator().manual_seed(1))
    parts = lma.decompose(x)
    assert (lma.restore(parts.trend, parts.seasonal) - x).abs().max().item() < 1e-6


def test_weights_form_a_simplex():
    lma = LearnableMovingAverage(n_channels=3, length=24)
    randomize(lma, seed=5)
    parts = lma.decompose(torch.randn(4, 24, 3))
    assert parts.weights.shape == (4, 24, 3, 5)
    assert torch.all(parts.weights > 0)
    assert torch.allclose(parts.weights.sum(dim=-1), torch.ones(4, 24, 3))


def test_seasonal_is_residual_of_raw_trend():
    lma = LearnableMovingAverage(n_channels=2, length=12)
    randomize(lma, seed=2)
    x = torch.randn(3, 12, 2)
    parts = lma.decompose(x)
    assert torch.allclose(parts.seasonal, x - parts.raw_trend)
    assert torch.allclose(parts.trend, lma.affine.gamma * parts.raw_trend + lma.affine.beta)


def test_gamma_floor():
    lma = LearnableMovingAverage(n_channels=2, length=8)
    with torch.no_grad():
        lma.affine.log_gamma.fill_(-50.0)
    assert torch.all(lma.affine.gamma == Config.GAMMA_FLOOR)


def test_long_kernels_dropped(caplog):
    with caplog.at_level(logging.WARNING):
        lma = LearnableMovingAverage(n_channels=2, length=4)
    assert lma.bank.kernel_sizes == [1, 2, 4]
    assert 'Dropping moving-average kernels [6, 12]' in caplog.text
    with pytest.raises(ShapeError):
        LearnableMovingAverage(n_channels=1, length=4, kernel_sizes=[6])


def test_global_weights_are_position_independent():
    lma = LearnableMovingAverage(n_channels=2, length=12, global_weights=True)
    with torch.no_grad():
        lma.bank.global_logits.copy_(torch.tensor([0.3, -1.0, 2.0, 0.0, 0.5]))
    weights = lma.decompose(torch.randn(2, 12, 2)).weights
    assert torch.allclose(weights, weights[0, 0, 0].expand_as(weights))
    assert lma.bank.weight_net is None


def test_ablation_uses_fixed_kernel(toy_config):
    lma = build_lma(toy_config({'lma.enabled': False}), n_channels=2, length=12)
    assert lma.bank.kernel_sizes == [3]
    assert list(lma.parameters()) == []
    x = torch.randn(2, 12, 2)
    parts = lma.decompose(x)
    assert torch.allclose(parts.trend, moving_average(x, 3))
    assert torch.allclose(lma.restore(parts.trend, parts.seasonal), x)


def test_channel_mismatch():
    lma = LearnableMovingAverage(n_channels=3, length=12)
    with pytest.raises(ShapeError):
        lma.decompose(torch.randn(2, 12, 2))
    with pytest.raises(ShapeError):
        lma.restore(torch.zeros(1, 12, 3), torch.zeros(1, 6, 3))


@pytest.mark.parametrize('l', [2, 4, 6])
def test_moving_average_shift_equivariant(l):
    x = torch.randn(2, 16, 3)
    shifted = torch.cat([x[:, :1], x[:, :-1]], dim=1)
    assert torch.allclose(moving_average(shifted, l)[:, l:], moving_average(x, l)[:, l - 1:-1])


def test_uniform_two_kernel_decomposition():
    lma = LearnableMovingAverage(n_channels=1, length=4, kernel_sizes=[1, 2], learnable=False)
    parts = lma.decompose(torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
    assert torch.allclose(parts.raw_trend[0, :, 0], torch.tensor([1.0, 1.75, 2.75, 3.75]))
    assert torch.allclose(parts.seasonal[0, :, 0], torch.tensor([0.0, 0.25, 0.25, 0.25]))
    assert torch.allclose(parts.trend, parts.raw_trend)
